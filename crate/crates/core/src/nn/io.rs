//! Flat parameter files.
//!
//! Layout (all little-endian):
//!
//! ```text
//! b"CADP" | version: u32 | layer count: u32 | layer sizes: u32 * count
//!        | value count: u64 | values: f64 * value count
//! ```
//!
//! Layer sizes are `[input, hidden.., representation, classes]`. Values are
//! always stored as 64-bit floats whatever the in-memory scalar type.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::{ModelParams, NetworkShape};
use crate::scalar::Scalar;

pub const PARAMS_MAGIC: [u8; 4] = *b"CADP";
pub const PARAMS_VERSION: u32 = 1;

pub fn write_params<T: Scalar, W: Write>(params: &ModelParams<T>, mut out: W) -> std::io::Result<()> {
    let sizes = params.shape().layer_sizes();
    out.write_all(&PARAMS_MAGIC)?;
    out.write_all(&PARAMS_VERSION.to_le_bytes())?;
    out.write_all(&(sizes.len() as u32).to_le_bytes())?;
    for s in sizes {
        out.write_all(&(s as u32).to_le_bytes())?;
    }
    out.write_all(&(params.len() as u64).to_le_bytes())?;
    for &x in params.as_slice() {
        out.write_all(&x.as_f64().to_le_bytes())?;
    }
    Ok(())
}

pub fn read_params<T: Scalar, R: Read>(mut input: R) -> Result<ModelParams<T>> {
    let bad = |reason: &str| Error::Format {
        path: "<params>".into(),
        reason: reason.to_string(),
    };
    let mut word = [0u8; 4];
    input.read_exact(&mut word).map_err(|_| bad("truncated header"))?;
    if word != PARAMS_MAGIC {
        return Err(bad("bad magic"));
    }
    let read_u32 = |input: &mut R| -> Result<u32> {
        let mut b = [0u8; 4];
        input.read_exact(&mut b).map_err(|_| bad("truncated header"))?;
        Ok(u32::from_le_bytes(b))
    };
    let version = read_u32(&mut input)?;
    if version != PARAMS_VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let count = read_u32(&mut input)? as usize;
    if count > 1024 {
        return Err(bad("implausible layer count"));
    }
    let sizes = (0..count)
        .map(|_| read_u32(&mut input).map(|s| s as usize))
        .collect::<Result<Vec<_>>>()?;
    let shape = NetworkShape::from_layer_sizes(&sizes)?;
    let mut long = [0u8; 8];
    input.read_exact(&mut long).map_err(|_| bad("truncated header"))?;
    let len = u64::from_le_bytes(long) as usize;
    if len != shape.param_count() {
        return Err(bad("value count disagrees with layer sizes"));
    }
    let mut values = Vec::with_capacity(len);
    for _ in 0..len {
        input.read_exact(&mut long).map_err(|_| bad("truncated values"))?;
        values.push(T::lit(f64::from_le_bytes(long)));
    }
    ModelParams::from_vec(shape, values)
}

impl<T: Scalar> ModelParams<T> {
    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
        let mut out = BufWriter::new(file);
        write_params(self, &mut out)
            .and_then(|_| out.flush())
            .map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
        read_params(BufReader::new(file)).map_err(|e| match e {
            Error::Format { reason, .. } => Error::Format {
                path: path.to_path_buf(),
                reason,
            },
            other => other,
        })
    }
}
