use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use zip::write::SimpleFileOptions;
use zip::{CompressionMethod, ZipArchive, ZipWriter};

use super::npy::{self, NpyArray, NpyData};
use super::{Dataset, Split};
use crate::error::{Error, Result};

/// Array keys expected in a dataset archive, in split order.
pub const NPZ_KEYS: [(Split, &str, &str); 3] = [
    (Split::Train, "train_images", "train_labels"),
    (Split::Val, "val_images", "val_labels"),
    (Split::Test, "test_images", "test_labels"),
];

/// Loads the train/val/test splits from a MedMNIST-style `.npz`.
///
/// `num_classes` is taken from the largest label across all three splits.
pub fn load_npz_dataset(path: impl AsRef<Path>) -> Result<[Dataset; 3]> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut archive = ZipArchive::new(file)?;

    let mut raw = Vec::with_capacity(3);
    for (split, img_key, lbl_key) in NPZ_KEYS {
        let images = read_array(&mut archive, img_key, path)?;
        let labels = read_array(&mut archive, lbl_key, path)?;
        raw.push((split, img_key, images, labels));
    }

    let mut decoded = Vec::with_capacity(3);
    let mut max_label = 0usize;
    for (split, key, images, labels) in raw {
        let (pixels, dims) = image_block(images, key)?;
        let labels = label_vector(labels, dims.0, key)?;
        max_label = labels.iter().copied().fold(max_label, usize::max);
        decoded.push((split, pixels, dims, labels));
    }

    let num_classes = max_label + 1;
    let mut out = decoded.into_iter().map(|(split, pixels, (_, h, w, c), labels)| {
        Dataset::new(pixels, labels, (h, w, c), num_classes, split)
    });
    Ok([
        out.next().unwrap()?,
        out.next().unwrap()?,
        out.next().unwrap()?,
    ])
}

fn read_array(archive: &mut ZipArchive<File>, key: &str, path: &Path) -> Result<NpyArray> {
    let name = format!("{key}.npy");
    let mut entry = match archive.by_name(&name) {
        Ok(e) => e,
        Err(zip::result::ZipError::FileNotFound) => {
            return Err(Error::format(format!("archive is missing key `{key}`")))
        }
        Err(e) => return Err(e.into()),
    };
    let mut bytes = Vec::with_capacity(entry.size() as usize);
    entry
        .read_to_end(&mut bytes)
        .map_err(|e| Error::io(path, e))?;
    npy::parse(&bytes).map_err(|e| Error::format(format!("`{key}`: {e}")))
}

fn image_block(arr: NpyArray, key: &str) -> Result<(Vec<u8>, (usize, usize, usize, usize))> {
    let dims = match arr.shape.as_slice() {
        &[n, h, w] => (n, h, w, 1),
        &[n, h, w, c] => (n, h, w, c),
        other => {
            return Err(Error::format(format!(
                "`{key}` has shape {other:?}, expected (N, H, W) or (N, H, W, C)"
            )))
        }
    };
    match arr.data {
        NpyData::U8(v) => Ok((v, dims)),
        NpyData::I64(_) => Err(Error::format(format!("`{key}` must be uint8"))),
    }
}

fn label_vector(arr: NpyArray, n: usize, images_key: &str) -> Result<Vec<usize>> {
    let key = images_key.replace("images", "labels");
    match arr.shape.as_slice() {
        &[m] | &[m, 1] if m == n => {}
        other => {
            return Err(Error::format(format!(
                "`{key}` has shape {other:?}, expected ({n},) or ({n}, 1)"
            )))
        }
    }
    match arr.data {
        NpyData::U8(v) => Ok(v.into_iter().map(usize::from).collect()),
        NpyData::I64(v) => v
            .into_iter()
            .map(|x| {
                usize::try_from(x).map_err(|_| Error::format(format!("`{key}` has label {x}")))
            })
            .collect(),
    }
}

/// Writes three splits (train, val, test order) in the layout read by
/// [`load_npz_dataset`]. Entries are stored uncompressed with a fixed
/// timestamp, so equal inputs give equal bytes.
pub fn write_npz_dataset(path: impl AsRef<Path>, splits: &[Dataset; 3]) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut zip = ZipWriter::new(file);
    let opts = SimpleFileOptions::default().compression_method(CompressionMethod::Stored);
    for (d, (_, img_key, lbl_key)) in splits.iter().zip(NPZ_KEYS) {
        let mut shape = vec![d.len(), d.height, d.width];
        if d.channels > 1 {
            shape.push(d.channels);
        }
        let images = NpyArray {
            shape,
            data: NpyData::U8(d.images.clone()),
        };
        let labels = if d.num_classes <= 256 {
            NpyData::U8(d.labels.iter().map(|&l| l as u8).collect())
        } else {
            NpyData::I64(d.labels.iter().map(|&l| l as i64).collect())
        };
        let labels = NpyArray {
            shape: vec![d.len(), 1],
            data: labels,
        };
        for (key, arr) in [(img_key, images), (lbl_key, labels)] {
            zip.start_file(format!("{key}.npy"), opts)?;
            zip.write_all(&npy::write(&arr))
                .map_err(|e| Error::io(path, e))?;
        }
    }
    zip.finish()?;
    Ok(())
}
