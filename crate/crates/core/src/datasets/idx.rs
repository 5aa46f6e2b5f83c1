//! MNIST-style IDX files (big-endian header, unsigned byte payload).

use std::fs;
use std::path::{Path, PathBuf};

use super::{resize_bilinear, DomainDataset, LoadOptions};
use crate::error::{Error, Result};

fn be_u32(bytes: &[u8], at: usize) -> Option<u32> {
    bytes.get(at..at + 4).map(|b| u32::from_be_bytes(b.try_into().unwrap()))
}

/// Parses an idx3-ubyte image file into `(count, rows, cols, pixels)`.
pub fn read_idx_images(bytes: &[u8]) -> Result<(usize, usize, usize, Vec<u8>)> {
    let bad = |m: &str| Error::Dataset(format!("idx images: {m}"));
    if be_u32(bytes, 0) != Some(0x0000_0803) {
        return Err(bad("bad magic (expected 0x00000803)"));
    }
    let n = be_u32(bytes, 4).ok_or_else(|| bad("truncated header"))? as usize;
    let rows = be_u32(bytes, 8).ok_or_else(|| bad("truncated header"))? as usize;
    let cols = be_u32(bytes, 12).ok_or_else(|| bad("truncated header"))? as usize;
    let body = &bytes[16.min(bytes.len())..];
    if body.len() != n * rows * cols {
        return Err(bad(&format!(
            "expected {} pixel bytes, found {}",
            n * rows * cols,
            body.len()
        )));
    }
    Ok((n, rows, cols, body.to_vec()))
}

/// Parses an idx1-ubyte label file.
pub fn read_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    let bad = |m: &str| Error::Dataset(format!("idx labels: {m}"));
    if be_u32(bytes, 0) != Some(0x0000_0801) {
        return Err(bad("bad magic (expected 0x00000801)"));
    }
    let n = be_u32(bytes, 4).ok_or_else(|| bad("truncated header"))? as usize;
    let body = &bytes[8.min(bytes.len())..];
    if body.len() != n {
        return Err(bad(&format!("expected {n} labels, found {}", body.len())));
    }
    Ok(body.to_vec())
}

fn find(dir: &Path, needle: &str) -> Result<PathBuf> {
    let mut hits: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.contains(needle))
        })
        .collect();
    hits.sort();
    match hits.len() {
        1 => Ok(hits.remove(0)),
        0 => Err(Error::Dataset(format!("no *{needle}* file in {}", dir.display()))),
        _ => Err(Error::Dataset(format!("several *{needle}* files in {}", dir.display()))),
    }
}

/// `path` is a directory holding one `*images-idx3-ubyte` and one
/// `*labels-idx1-ubyte` file.
pub(super) fn load(name: &str, path: &Path, opts: &LoadOptions) -> Result<DomainDataset> {
    let img_path = find(path, "images-idx3-ubyte")?;
    let lab_path = find(path, "labels-idx1-ubyte")?;
    let img_bytes = fs::read(&img_path).map_err(|e| Error::io(&img_path, e))?;
    let lab_bytes = fs::read(&lab_path).map_err(|e| Error::io(&lab_path, e))?;
    let (n, rows, cols, pixels) = read_idx_images(&img_bytes)?;
    let labels = read_idx_labels(&lab_bytes)?;
    if n == 0 {
        return Err(Error::EmptyDataset(path.to_path_buf()));
    }
    if labels.len() != n {
        return Err(Error::Dataset(format!("{n} images but {} labels", labels.len())));
    }
    let classes = opts
        .classes
        .clone()
        .unwrap_or_else(|| (0..10).map(|d| d.to_string()).collect());
    let (th, tw) = opts.image_size;
    let mut images = Vec::with_capacity(n * th * tw * opts.channels);
    for i in 0..n {
        let src: Vec<f32> = pixels[i * rows * cols..(i + 1) * rows * cols]
            .iter()
            .map(|&p| p as f32 / 255.0)
            .collect();
        let resized = resize_bilinear(&src, (rows, cols), (th, tw), 1);
        for v in resized {
            for _ in 0..opts.channels {
                images.push(v);
            }
        }
    }
    let labels = labels.into_iter().map(usize::from).collect();
    DomainDataset::new(name, (th, tw, opts.channels), images, labels, classes)
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn idx_pair(n: usize, labels: &[u8]) -> (Vec<u8>, Vec<u8>) {
        let mut img = vec![0, 0, 8, 3];
        img.extend_from_slice(&(n as u32).to_be_bytes());
        img.extend_from_slice(&2u32.to_be_bytes());
        img.extend_from_slice(&2u32.to_be_bytes());
        img.extend((0..n * 4).map(|i| (i * 17 % 256) as u8));
        let mut lab = vec![0, 0, 8, 1];
        lab.extend_from_slice(&(labels.len() as u32).to_be_bytes());
        lab.extend_from_slice(labels);
        (img, lab)
    }

    #[test]
    fn loads_a_digit_directory_with_ten_classes() {
        let dir = tempfile::tempdir().unwrap();
        let (img, lab) = idx_pair(3, &[0, 9, 4]);
        fs::write(dir.path().join("train-images-idx3-ubyte"), img).unwrap();
        fs::write(dir.path().join("train-labels-idx1-ubyte"), lab).unwrap();
        let opts = LoadOptions {
            image_size: (2, 2),
            ..Default::default()
        };
        let d = load("mnist", dir.path(), &opts).unwrap();
        assert_eq!(d.class_count(), 10);
        assert_eq!(d.labels, vec![0, 9, 4]);
        assert!(d.images.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn label_outside_declared_classes_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let (img, lab) = idx_pair(2, &[0, 7]);
        fs::write(dir.path().join("x-images-idx3-ubyte"), img).unwrap();
        fs::write(dir.path().join("x-labels-idx1-ubyte"), lab).unwrap();
        let opts = LoadOptions {
            image_size: (2, 2),
            channels: 1,
            classes: Some(vec!["0".into(), "1".into()]),
        };
        assert!(load("x", dir.path(), &opts).is_err());
    }

    #[test]
    fn bad_magic_is_rejected() {
        assert!(read_idx_images(&[0, 0, 8, 1, 0, 0, 0, 0]).is_err());
        assert!(read_idx_labels(&[0, 0, 8, 3, 0, 0, 0, 0]).is_err());
    }
}
