//! Big-endian IDX reader (the MNIST distribution format). Gzip-compressed
//! files are detected by their magic bytes and decompressed transparently.

use std::fs::File;
use std::io::{BufReader, Read};
use std::path::Path;

use flate2::read::GzDecoder;

use super::{Dataset, Provenance};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::scalar::Scalar;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn read_all(path: &Path) -> Result<Vec<u8>> {
    let mut raw = Vec::new();
    File::open(path)
        .and_then(|f| BufReader::new(f).read_to_end(&mut raw))
        .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(&raw[..])
            .read_to_end(&mut out)
            .map_err(|e| Error::Format {
                path: path.to_path_buf(),
                reason: format!("gzip: {e}"),
            })?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

struct Idx {
    dims: Vec<usize>,
    payload: Vec<u8>,
}

fn parse(path: &Path, bytes: &[u8], magic: u32) -> Result<Idx> {
    let fail = |reason: String| Error::Format {
        path: path.to_path_buf(),
        reason,
    };
    let word = |at: usize| -> Result<usize> {
        bytes
            .get(at..at + 4)
            .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")) as usize)
            .ok_or_else(|| fail("truncated header".into()))
    };
    let found = word(0)? as u32;
    if found != magic {
        return Err(fail(format!("bad magic {found:#010x}, expected {magic:#010x}")));
    }
    let ndims = (magic & 0xff) as usize;
    let dims = (0..ndims).map(|i| word(4 + 4 * i)).collect::<Result<Vec<_>>>()?;
    let start = 4 + 4 * ndims;
    let expected: usize = dims.iter().product();
    let payload = &bytes[start..];
    if payload.len() != expected {
        return Err(fail(format!(
            "payload holds {} bytes, header promises {expected}",
            payload.len()
        )));
    }
    Ok(Idx {
        dims,
        payload: payload.to_vec(),
    })
}

/// Load an image/label IDX pair. Pixels are scaled by 1/255; the class count
/// is one more than the largest label (at least 2).
pub fn load_idx<T: Scalar>(images: &Path, labels: &Path) -> Result<Dataset<T>> {
    let img = parse(images, &read_all(images)?, IDX_IMAGES_MAGIC)?;
    let lab = parse(labels, &read_all(labels)?, IDX_LABELS_MAGIC)?;
    let (count, rows, cols) = (img.dims[0], img.dims[1], img.dims[2]);
    if lab.dims[0] != count {
        return Err(Error::Consistency(format!(
            "{} holds {count} images but {} holds {} labels",
            images.display(),
            labels.display(),
            lab.dims[0]
        )));
    }
    let scale = T::one() / T::lit(255.0);
    let features: Vec<T> = img.payload.iter().map(|&p| T::lit(f64::from(p)) * scale).collect();
    let labels: Vec<usize> = lab.payload.iter().map(|&y| usize::from(y)).collect();
    let classes = labels.iter().copied().max().unwrap_or(0).max(1) + 1;
    let provenance = match images.file_name().and_then(|n| n.to_str()) {
        Some(name) if name.starts_with("train-") => Provenance::MnistTrain,
        Some(name) if name.starts_with("t10k-") => Provenance::MnistTest,
        _ => Provenance::Idx,
    };
    Dataset::new(
        Matrix::from_vec(count, rows * cols, features)?,
        labels,
        classes,
        provenance,
    )
}

/// Load `{prefix}-images-idx3-ubyte[.gz]` and `{prefix}-labels-idx1-ubyte[.gz]`
/// from a directory, e.g. prefix `train` or `t10k`.
pub fn load_idx_pair<T: Scalar>(dir: &Path, prefix: &str) -> Result<Dataset<T>> {
    let pick = |stem: String| {
        let plain = dir.join(&stem);
        if plain.exists() {
            plain
        } else {
            dir.join(format!("{stem}.gz"))
        }
    };
    load_idx(
        &pick(format!("{prefix}-images-idx3-ubyte")),
        &pick(format!("{prefix}-labels-idx1-ubyte")),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn idx_bytes(magic: u32, dims: &[u32], payload: &[u8]) -> Vec<u8> {
        let mut out = magic.to_be_bytes().to_vec();
        for d in dims {
            out.extend_from_slice(&d.to_be_bytes());
        }
        out.extend_from_slice(payload);
        out
    }

    fn write(dir: &Path, name: &str, bytes: &[u8]) -> std::path::PathBuf {
        let p = dir.join(name);
        std::fs::write(&p, bytes).unwrap();
        p
    }

    #[test]
    fn two_image_fixture() {
        let dir = tempfile::tempdir().unwrap();
        let images = write(
            dir.path(),
            "img",
            &idx_bytes(IDX_IMAGES_MAGIC, &[2, 2, 2], &[0, 255, 255, 0, 0, 0, 255, 255]),
        );
        let labels = write(dir.path(), "lab", &idx_bytes(IDX_LABELS_MAGIC, &[2], &[3, 1]));
        let ds: Dataset<f64> = load_idx(&images, &labels).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.dim(), 4);
        assert_eq!(ds.classes(), 4);
        assert_eq!(ds.sample(0), &[0.0, 1.0, 1.0, 0.0]);
        assert_eq!(ds.sample(1), &[0.0, 0.0, 1.0, 1.0]);
        assert_eq!(ds.labels(), &[3, 1]);
    }

    #[test]
    fn gzip_is_transparent() {
        let dir = tempfile::tempdir().unwrap();
        let raw = idx_bytes(IDX_IMAGES_MAGIC, &[1, 1, 2], &[51, 102]);
        let mut gz = flate2::write::GzEncoder::new(Vec::new(), flate2::Compression::default());
        gz.write_all(&raw).unwrap();
        write(dir.path(), "train-images-idx3-ubyte.gz", &gz.finish().unwrap());
        write(
            dir.path(),
            "train-labels-idx1-ubyte",
            &idx_bytes(IDX_LABELS_MAGIC, &[1], &[1]),
        );
        let ds: Dataset<f32> = load_idx_pair(dir.path(), "train").unwrap();
        assert_eq!(ds.provenance(), Provenance::MnistTrain);
        assert!((ds.sample(0)[0] - 0.2).abs() < 1e-7);
    }

    #[test]
    fn malformed_inputs() {
        let dir = tempfile::tempdir().unwrap();
        let labels = write(dir.path(), "lab", &idx_bytes(IDX_LABELS_MAGIC, &[2], &[0, 1]));
        let truncated = write(
            dir.path(),
            "short",
            &idx_bytes(IDX_IMAGES_MAGIC, &[2, 2, 2], &[0, 1, 2]),
        );
        assert!(matches!(
            load_idx::<f64>(&truncated, &labels),
            Err(Error::Format { .. })
        ));
        let swapped = write(dir.path(), "swap", &idx_bytes(IDX_LABELS_MAGIC, &[2], &[0, 1]));
        assert!(matches!(load_idx::<f64>(&swapped, &labels), Err(Error::Format { .. })));
        let header_only = write(dir.path(), "hdr", &[0, 0, 8]);
        assert!(matches!(
            load_idx::<f64>(&header_only, &labels),
            Err(Error::Format { .. })
        ));
        let three = write(
            dir.path(),
            "three",
            &idx_bytes(IDX_IMAGES_MAGIC, &[3, 1, 1], &[0, 1, 2]),
        );
        assert!(matches!(load_idx::<f64>(&three, &labels), Err(Error::Consistency(_))));
    }
}
