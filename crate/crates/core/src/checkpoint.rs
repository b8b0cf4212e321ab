//! Model checkpoints.
//!
//! ```text
//! reid-checkpoint version=1
//! layers=<D>,<h_1>,...,<F>
//! normalize=<true|false>
//! seed=<u64>
//! config.<key>=<value>        (zero or more)
//! end
//! <payload>
//! ```
//!
//! The payload holds, for each layer in order, the `out x in` weights
//! (row-major) followed by the `out` biases, all as little-endian f64. Its
//! length is fixed by `layers`; anything after it is an error.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::Matrix;
use crate::network::{Layer, ModelParams};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub seed: u64,
    pub config: Vec<(String, String)>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let sizes = self.params.sizes().iter().map(|s| s.to_string()).collect::<Vec<_>>().join(",");
        let mut header = format!("reid-checkpoint version={CHECKPOINT_FORMAT_VERSION}\n");
        let _ = writeln!(header, "layers={sizes}");
        let _ = writeln!(header, "normalize={}", self.params.normalize);
        let _ = writeln!(header, "seed={}", self.seed);
        for (k, v) in &self.config {
            let _ = writeln!(header, "config.{k}={v}");
        }
        header.push_str("end\n");
        let mut out = header.into_bytes();
        for t in self.params.tensors() {
            for v in t {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let corrupt = |offset: usize, msg: String| Error::Corrupt { offset: offset as u64, msg };
        let mut pos = 0;
        let next_line = |pos: &mut usize| -> Result<String> {
            let rest = &bytes[*pos..];
            let nl = rest
                .iter()
                .position(|&b| b == b'\n')
                .ok_or_else(|| corrupt(*pos, "unterminated header line".into()))?;
            let line = std::str::from_utf8(&rest[..nl]).map_err(|_| corrupt(*pos, "header is not UTF-8".into()))?;
            *pos += nl + 1;
            Ok(line.to_string())
        };

        let first = next_line(&mut pos)?;
        if first != format!("reid-checkpoint version={CHECKPOINT_FORMAT_VERSION}") {
            return Err(corrupt(0, format!("unsupported checkpoint header {first:?}")));
        }
        let mut sizes: Option<Vec<usize>> = None;
        let mut normalize: Option<bool> = None;
        let mut seed: Option<u64> = None;
        let mut config = Vec::new();
        loop {
            let at = pos;
            let line = next_line(&mut pos)?;
            if line == "end" {
                break;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| corrupt(at, format!("bad header line {line:?}")))?;
            match key {
                "layers" => {
                    let parsed: std::result::Result<Vec<usize>, _> = value.split(',').map(str::parse).collect();
                    sizes = Some(parsed.map_err(|_| corrupt(at, format!("bad layer sizes {value:?}")))?);
                }
                "normalize" => normalize = Some(value.parse().map_err(|_| corrupt(at, format!("bad normalize {value:?}")))?),
                "seed" => seed = Some(value.parse().map_err(|_| corrupt(at, format!("bad seed {value:?}")))?),
                k => match k.strip_prefix("config.") {
                    Some(name) => config.push((name.to_string(), value.to_string())),
                    None => return Err(corrupt(at, format!("unknown header key {k:?}"))),
                },
            }
        }
        let sizes = sizes.ok_or_else(|| corrupt(0, "missing layers".into()))?;
        let normalize = normalize.ok_or_else(|| corrupt(0, "missing normalize".into()))?;
        let seed = seed.ok_or_else(|| corrupt(0, "missing seed".into()))?;
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(corrupt(0, format!("invalid layer sizes {sizes:?}")));
        }

        let expected: usize = sizes.windows(2).map(|w| w[1] * w[0] + w[1]).sum::<usize>() * 8;
        let payload = &bytes[pos..];
        if payload.len() != expected {
            let offset = pos + payload.len().min(expected);
            return Err(corrupt(offset, format!("payload is {} bytes, expected {expected}", payload.len())));
        }
        let mut values = payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
        let mut layers = Vec::with_capacity(sizes.len() - 1);
        for w in sizes.windows(2) {
            let (input, output) = (w[0], w[1]);
            let weights: Vec<f64> = values.by_ref().take(input * output).collect();
            let bias: Vec<f64> = values.by_ref().take(output).collect();
            layers.push(Layer { weights: Matrix::from_vec(output, input, weights)?, bias });
        }
        let params = ModelParams::from_layers(layers, normalize).map_err(|e| corrupt(pos, e.to_string()))?;
        Ok(Self { params, seed, config })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}
