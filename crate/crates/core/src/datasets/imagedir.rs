//! `root/<class_name>/*.png` trees, one sub-directory per class.

use std::fs;
use std::path::{Path, PathBuf};

use super::{resize_bilinear, DomainDataset, LoadOptions};
use crate::error::{Error, Result};

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut v: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .collect();
    v.sort();
    Ok(v)
}

pub(super) fn load(name: &str, root: &Path, opts: &LoadOptions) -> Result<DomainDataset> {
    let class_dirs: Vec<PathBuf> = sorted_entries(root)?.into_iter().filter(|p| p.is_dir()).collect();
    let found: Vec<String> = class_dirs
        .iter()
        .map(|p| p.file_name().unwrap_or_default().to_string_lossy().into_owned())
        .collect();
    let classes = match &opts.classes {
        Some(declared) => {
            if let Some(extra) = found.iter().find(|c| !declared.contains(c)) {
                return Err(Error::Dataset(format!(
                    "{}: class directory {extra:?} is outside the declared class set",
                    root.display()
                )));
            }
            declared.clone()
        }
        None => found.clone(),
    };
    let (th, tw) = opts.image_size;
    let ch = opts.channels;
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for (dir, class) in class_dirs.iter().zip(&found) {
        let label = classes.iter().position(|c| c == class).expect("class checked above");
        for file in sorted_entries(dir)? {
            let is_png = file
                .extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| e.eq_ignore_ascii_case("png"));
            if !is_png {
                continue;
            }
            let img = image::open(&file).map_err(|e| Error::Dataset(format!("{}: {e}", file.display())))?;
            let (w, h) = (img.width() as usize, img.height() as usize);
            let raw: Vec<f32> = match ch {
                1 => img
                    .to_luma8()
                    .into_raw()
                    .into_iter()
                    .map(|p| p as f32 / 255.0)
                    .collect(),
                3 => img.to_rgb8().into_raw().into_iter().map(|p| p as f32 / 255.0).collect(),
                other => return Err(Error::Dataset(format!("unsupported channel count {other}"))),
            };
            images.extend(resize_bilinear(&raw, (h, w), (th, tw), ch));
            labels.push(label);
        }
    }
    if labels.is_empty() {
        return Err(Error::EmptyDataset(root.to_path_buf()));
    }
    DomainDataset::new(name, (th, tw, ch), images, labels, classes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_png(path: &Path, value: u8) {
        let img = image::GrayImage::from_pixel(5, 4, image::Luma([value]));
        img.save(path).unwrap();
    }

    #[test]
    fn seven_class_tree_gives_seven_classes() {
        let dir = tempfile::tempdir().unwrap();
        for (i, c) in ["dog", "elephant", "giraffe", "guitar", "horse", "house", "person"]
            .iter()
            .enumerate()
        {
            let d = dir.path().join(c);
            fs::create_dir(&d).unwrap();
            write_png(&d.join("a.png"), (i * 30) as u8);
            write_png(&d.join("b.png"), 255);
        }
        let opts = LoadOptions {
            image_size: (8, 8),
            ..Default::default()
        };
        let ds = load("photo", dir.path(), &opts).unwrap();
        assert_eq!(ds.class_count(), 7);
        assert_eq!(ds.len(), 14);
        assert_eq!(ds.labels[0], 0);
        assert_eq!(ds.labels[13], 6);
        assert!(ds.image(1).iter().all(|&v| (v - 1.0).abs() < 1e-6));
    }

    #[test]
    fn empty_directory_is_an_empty_dataset() {
        let dir = tempfile::tempdir().unwrap();
        let err = load("x", dir.path(), &LoadOptions::default()).unwrap_err();
        assert!(err.to_string().contains("empty dataset"), "{err}");
    }

    #[test]
    fn undeclared_class_directory_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        fs::create_dir(dir.path().join("cat")).unwrap();
        write_png(&dir.path().join("cat/a.png"), 3);
        let opts = LoadOptions {
            classes: Some(vec!["dog".into()]),
            ..Default::default()
        };
        assert!(load("x", dir.path(), &opts).is_err());
    }
}
