//! On-disk dataset layout: `<root>/images/<file>` plus one manifest per
//! split at `<root>/splits/<split>.csv` with header `filename,label`. An
//! optional `<root>/splits/<split>.transform` names an episode transform.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use image::imageops::FilterType;
use image::RgbImage;

use super::{ClassData, DatasetSplit, EpisodeTransform, Image, SplitName};
use crate::error::{Error, Result};

pub const MINIIMAGENET_RESOLUTION: usize = 84;

fn miniimagenet_classes(split: SplitName) -> usize {
    match split {
        SplitName::Train => 64,
        SplitName::Val => 16,
        SplitName::Test => 20,
    }
}

/// Loads one miniImageNet split and validates its class count (64/16/20).
pub fn load_miniimagenet(root: &Path, split: SplitName) -> Result<DatasetSplit> {
    load_split(
        root,
        split,
        MINIIMAGENET_RESOLUTION,
        Some(miniimagenet_classes(split)),
    )
}

/// Loads a split, resizing every image to `resolution` (bilinear) when needed.
/// Class ids are assigned in sorted label order.
pub fn load_split(
    root: &Path,
    split: SplitName,
    resolution: usize,
    expected_classes: Option<usize>,
) -> Result<DatasetSplit> {
    let manifest = root.join("splits").join(format!("{split}.csv"));
    if !manifest.is_file() {
        return Err(Error::ManifestNotFound(manifest));
    }
    let mut reader = csv::Reader::from_path(&manifest)?;
    let headers = reader.headers()?.clone();
    let column = |name: &str| {
        headers.iter().position(|h| h.trim() == name).ok_or_else(|| Error::Manifest {
            path: manifest.clone(),
            message: format!("missing column {name:?}"),
        })
    };
    let (file_col, label_col) = (column("filename")?, column("label")?);

    let mut by_label: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for record in reader.records() {
        let record = record?;
        let get = |i: usize| record.get(i).map(str::trim).unwrap_or_default().to_string();
        by_label.entry(get(label_col)).or_default().push(get(file_col));
    }
    if let Some(expected) = expected_classes {
        if by_label.len() != expected {
            return Err(Error::ClassCount {
                split: split.to_string(),
                found: by_label.len(),
                expected,
            });
        }
    }

    let image_dir = root.join("images");
    let mut classes = Vec::with_capacity(by_label.len());
    for (id, (label, files)) in by_label.into_iter().enumerate() {
        let mut images = Vec::with_capacity(files.len());
        for file in files {
            let path = image_dir.join(&file);
            if !path.is_file() {
                return Err(Error::MissingImage(path));
            }
            let decoded = image::open(&path).map_err(|source| Error::ImageDecode {
                path: path.clone(),
                source,
            })?;
            let mut rgb = decoded.to_rgb8();
            let target = resolution as u32;
            if rgb.width() != target || rgb.height() != target {
                rgb = image::imageops::resize(&rgb, target, target, FilterType::Triangle);
            }
            images.push(Arc::new(Image::new(resolution, resolution, rgb.into_raw())?));
        }
        classes.push(ClassData { id, label, images });
    }
    let transform_file = root.join("splits").join(format!("{split}.transform"));
    let transform = if transform_file.is_file() {
        fs::read_to_string(&transform_file)?
            .trim()
            .parse()
            .map_err(|e: Error| Error::Manifest {
                path: transform_file.clone(),
                message: e.to_string(),
            })?
    } else {
        EpisodeTransform::None
    };
    Ok(DatasetSplit::new(split, resolution, classes)?.with_transform(transform))
}

/// Materializes a split as PNG files plus its manifest.
pub fn write_split(root: &Path, split: &DatasetSplit) -> Result<()> {
    let image_dir = root.join("images");
    let split_dir = root.join("splits");
    fs::create_dir_all(&image_dir)?;
    fs::create_dir_all(&split_dir)?;
    let mut writer = csv::Writer::from_path(split_dir.join(format!("{}.csv", split.name())))?;
    writer.write_record(["filename", "label"])?;
    for class in split.classes() {
        for (i, img) in class.images.iter().enumerate() {
            let file = format!("{}_{}_{i:04}.png", split.name(), class.label);
            let buffer = RgbImage::from_raw(img.width() as u32, img.height() as u32, img.pixels().to_vec())
                .expect("image buffer matches its extents");
            buffer.save(image_dir.join(&file)).map_err(|source| Error::ImageDecode {
                path: image_dir.join(&file),
                source,
            })?;
            writer.write_record([file.as_str(), class.label.as_str()])?;
        }
    }
    writer.flush()?;
    let transform_file = split_dir.join(format!("{}.transform", split.name()));
    match split.transform() {
        EpisodeTransform::None if transform_file.exists() => fs::remove_file(transform_file)?,
        EpisodeTransform::None => {}
        t => fs::write(transform_file, format!("{}\n", t.as_str()))?,
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synthetic_dataset, SyntheticMode};

    #[test]
    fn empty_root_reports_missing_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let err = load_miniimagenet(dir.path(), SplitName::Train).unwrap_err();
        assert!(matches!(err, Error::ManifestNotFound(_)));
        assert!(err.to_string().contains("manifest not found"));
    }

    #[test]
    fn missing_image_is_named() {
        let dir = tempfile::tempdir().unwrap();
        fs::create_dir_all(dir.path().join("splits")).unwrap();
        fs::write(
            dir.path().join("splits/test.csv"),
            "filename,label\nghost.jpg,n0001\n",
        )
        .unwrap();
        let err = load_split(dir.path(), SplitName::Test, 16, None).unwrap_err();
        assert!(matches!(err, Error::MissingImage(_)));
        assert!(err.to_string().contains("ghost.jpg"));
    }

    #[test]
    fn class_count_is_validated() {
        let dir = tempfile::tempdir().unwrap();
        let split = synthetic_dataset(3, 2, 16, SyntheticMode::Separable, 4).unwrap();
        write_split(dir.path(), &split).unwrap();
        let err = load_miniimagenet(dir.path(), SplitName::Train).unwrap_err();
        assert!(matches!(
            err,
            Error::ClassCount {
                found: 3,
                expected: 64,
                ..
            }
        ));
    }

    #[test]
    fn written_split_loads_back_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let split = synthetic_dataset(3, 4, 16, SyntheticMode::Pairwise, 8).unwrap();
        write_split(dir.path(), &split).unwrap();
        let loaded = load_split(dir.path(), SplitName::Train, 16, Some(3)).unwrap();
        assert_eq!(loaded.num_examples(), 12);
        assert_eq!(loaded.transform(), EpisodeTransform::RotateChannels);
        for (a, b) in split.classes().iter().zip(loaded.classes()) {
            assert_eq!(a.label, b.label);
            for (x, y) in a.images.iter().zip(&b.images) {
                assert_eq!(x.pixels(), y.pixels());
            }
        }
    }

    #[test]
    fn loader_resizes_to_requested_resolution() {
        let dir = tempfile::tempdir().unwrap();
        let split = synthetic_dataset(2, 1, 32, SyntheticMode::Separable, 2).unwrap();
        write_split(dir.path(), &split).unwrap();
        let loaded = load_split(dir.path(), SplitName::Train, 16, None).unwrap();
        assert_eq!(loaded.transform(), EpisodeTransform::None);
        assert_eq!(loaded.resolution(), 16);
        assert_eq!(loaded.classes()[0].images[0].height(), 16);
    }
}
