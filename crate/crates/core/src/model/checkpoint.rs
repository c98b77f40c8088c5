//! Named-tensor container used for checkpoints and optimizer state:
//! `MAGIC`, a little-endian `u32` version, then until EOF records of
//! `u32 name_len | name (utf-8) | u32 rank | u32 extents... | f32 data...`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::{ConvBlockParams, FilmGeneratorParams, Network, RunningStats, FIRST_MODULATED_BLOCK, NUM_BLOCKS};

pub const MAGIC: &[u8; 7] = b"XMODNET";
pub const FORMAT_VERSION: u32 = 1;

pub fn encode_container(records: &[(String, Tensor<f32>)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    for (name, t) in records {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated while reading {what} at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
}

pub fn decode_container(bytes: &[u8]) -> Result<Vec<(String, Tensor<f32>)>> {
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.take(MAGIC.len(), "magic").ok() != Some(&MAGIC[..]) {
        return Err(Error::Checkpoint("bad magic: not a checkpoint file".into()));
    }
    let version = cur.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {version} (expected {FORMAT_VERSION})"
        )));
    }
    let mut records = Vec::new();
    while cur.pos < bytes.len() {
        let len = cur.u32("name length")? as usize;
        let name = std::str::from_utf8(cur.take(len, "name")?)
            .map_err(|_| Error::Checkpoint("record name is not utf-8".into()))?
            .to_string();
        let rank = cur.u32("rank")? as usize;
        if rank > 8 {
            return Err(Error::Checkpoint(format!("{name}: implausible rank {rank}")));
        }
        let shape = (0..rank)
            .map(|_| cur.u32("extent").map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| Error::Checkpoint(format!("{name}: extents overflow")))?;
        let data = cur
            .take(n, &name)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        records.push((name, Tensor::new(shape, data)?));
    }
    Ok(records)
}

/// Writes via a temporary sibling and a rename so a crash never leaves a
/// half-written file under `path`.
pub fn write_container(path: &Path, records: &[(String, Tensor<f32>)]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, encode_container(records))?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn read_container(path: &Path) -> Result<Vec<(String, Tensor<f32>)>> {
    decode_container(&fs::read(path)?)
}

fn vec_tensor<T: Scalar>(v: &[T]) -> Tensor<f32> {
    Tensor::new([v.len()], v.iter().map(|x| x.as_f64() as f32).collect()).expect("1-d")
}

impl<T: Scalar> Network<T> {
    /// Parameters plus running batch-norm statistics, as f32 records.
    pub fn to_records(&self) -> Vec<(String, Tensor<f32>)> {
        let mut out = Vec::new();
        for (i, b) in self.blocks.iter().enumerate() {
            let n = i + 1;
            out.push((format!("block{n}.kernels"), b.kernels.cast()));
            out.push((format!("block{n}.conv_bias"), b.conv_bias.cast()));
            out.push((format!("block{n}.bn_gamma"), b.bn_gamma.cast()));
            out.push((format!("block{n}.bn_beta"), b.bn_beta.cast()));
            if let Some(r) = &b.running {
                out.push((format!("block{n}.bn_mean"), vec_tensor(&r.mean)));
                out.push((format!("block{n}.bn_var"), vec_tensor(&r.var)));
            }
        }
        for (i, g) in self.generators.iter().enumerate() {
            let n = i + FIRST_MODULATED_BLOCK;
            out.push((format!("gen{n}.W"), g.w.cast()));
            out.push((format!("gen{n}.b"), g.b.cast()));
            out.push((format!("gen{n}.gamma0"), g.gamma0.cast()));
            out.push((format!("gen{n}.beta0"), g.beta0.cast()));
        }
        out
    }

    /// Inverse of [`Self::to_records`]. The presence of `gen2.*` decides the
    /// model kind; unknown record names are rejected.
    pub fn from_records(records: Vec<(String, Tensor<f32>)>) -> Result<Self> {
        let mut map: BTreeMap<String, Tensor<f32>> = BTreeMap::new();
        for (name, t) in records {
            if map.insert(name.clone(), t).is_some() {
                return Err(Error::Checkpoint(format!("duplicate record {name}")));
            }
        }
        fn take<T: Scalar>(map: &mut BTreeMap<String, Tensor<f32>>, name: String) -> Result<Tensor<T>> {
            map.remove(&name)
                .map(|t| t.cast::<T>())
                .ok_or_else(|| Error::Checkpoint(format!("missing record {name}")))
        }
        let mut blocks = Vec::with_capacity(NUM_BLOCKS);
        for n in 1..=NUM_BLOCKS {
            let kernels = take(&mut map, format!("block{n}.kernels"))?;
            let conv_bias = take(&mut map, format!("block{n}.conv_bias"))?;
            let bn_gamma = take(&mut map, format!("block{n}.bn_gamma"))?;
            let bn_beta = take(&mut map, format!("block{n}.bn_beta"))?;
            let running = match (take(&mut map, format!("block{n}.bn_mean")), take(&mut map, format!("block{n}.bn_var"))) {
                (Ok(m), Ok(v)) => {
                    if m.numel() != bn_gamma.numel() || v.numel() != bn_gamma.numel() {
                        return Err(Error::Checkpoint(format!("block{n} running statistics have wrong length")));
                    }
                    Some(RunningStats {
                        mean: m.into_data(),
                        var: v.into_data(),
                    })
                }
                (Err(_), Err(_)) => None,
                _ => {
                    return Err(Error::Checkpoint(format!(
                        "block{n} has only one of bn_mean/bn_var"
                    )))
                }
            };
            blocks.push(ConvBlockParams {
                kernels,
                conv_bias,
                bn_gamma,
                bn_beta,
                running,
            });
        }
        let mut generators = Vec::new();
        if map.contains_key(&format!("gen{FIRST_MODULATED_BLOCK}.W")) {
            for n in FIRST_MODULATED_BLOCK..=NUM_BLOCKS {
                generators.push(FilmGeneratorParams {
                    w: take(&mut map, format!("gen{n}.W"))?,
                    b: take(&mut map, format!("gen{n}.b"))?,
                    gamma0: take(&mut map, format!("gen{n}.gamma0"))?,
                    beta0: take(&mut map, format!("gen{n}.beta0"))?,
                });
            }
        }
        if let Some(extra) = map.keys().next() {
            return Err(Error::Checkpoint(format!("unexpected record {extra}")));
        }
        Network::from_parts(blocks, generators).map_err(|e| Error::Checkpoint(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_container(path, &self.to_records())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_records(read_container(path)?)
    }
}
