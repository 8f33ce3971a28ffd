//! Binary checkpoint format.
//!
//! `UMAN1`, then little-endian: `u32` tensor count; per tensor a `u16` name
//! length, the UTF-8 name, a `u8` rank, `u32` dims and `f32` row-major data.
//! Parameters come first in registration order, then every batch-norm layer's
//! `<name>.running_mean` and `<name>.running_var`.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::network::Model;
use crate::tensor::{BnStats, Tensor};

pub const MAGIC: &[u8; 5] = b"UMAN1";

/// Every tensor a model persists, with checkpoint names.
pub fn named_tensors(model: &Model) -> Vec<(String, Tensor)> {
    let mut out: Vec<(String, Tensor)> = model
        .params
        .iter()
        .map(|p| (p.name.clone(), p.value.clone()))
        .collect();
    for (name, stats) in model.buffers.iter() {
        out.push((format!("{name}.running_mean"), stats.running_mean.clone()));
        out.push((format!("{name}.running_var"), stats.running_var.clone()));
    }
    out
}

pub fn encode(tensors: &[(String, Tensor)]) -> Result<Vec<u8>> {
    let mut out = MAGIC.to_vec();
    let count = u32::try_from(tensors.len()).map_err(|_| Error::Checkpoint("too many tensors".into()))?;
    out.extend(count.to_le_bytes());
    for (name, t) in tensors {
        let len = u16::try_from(name.len())
            .map_err(|_| Error::Checkpoint(format!("tensor name too long: {name}")))?;
        out.extend(len.to_le_bytes());
        out.extend(name.as_bytes());
        let rank = u8::try_from(t.rank()).map_err(|_| Error::Checkpoint(format!("{name}: rank too large")))?;
        out.push(rank);
        for &d in t.shape() {
            let d = u32::try_from(d).map_err(|_| Error::Checkpoint(format!("{name}: dim too large")))?;
            out.extend(d.to_le_bytes());
        }
        for &v in t.data() {
            out.extend((v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|e| *e <= self.bytes.len()).ok_or_else(|| {
            Error::Checkpoint(format!("truncated checkpoint while reading {what} at byte {}", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(MAGIC.len(), "magic")? != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
    }
    let count = r.u32("tensor count")? as usize;
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = u16::from_le_bytes(r.take(2, "name length")?.try_into().unwrap()) as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = r.take(1, "rank")?[0] as usize;
        let shape = (0..rank)
            .map(|_| r.u32("dims").map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| Error::Checkpoint(format!("{name}: shape overflows")))?;
        let raw = r.take(n.checked_mul(4).unwrap_or(usize::MAX), &name)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        out.push((name, Tensor::new(&shape, data)?));
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes after the last tensor",
            bytes.len() - r.pos
        )));
    }
    Ok(out)
}

/// Overwrites the model's parameters and running statistics.
///
/// Every tensor is checked first; on any mismatch the model is untouched and
/// the error lists the offending names.
pub fn apply(model: &mut Model, tensors: Vec<(String, Tensor)>) -> Result<()> {
    let expected = named_tensors(model);
    let mut given: HashMap<String, Tensor> = HashMap::with_capacity(tensors.len());
    let mut bad = Vec::new();
    for (name, t) in tensors {
        if given.contains_key(&name) {
            bad.push(format!("{name} (duplicate)"));
        }
        given.insert(name, t);
    }
    for (name, t) in &expected {
        match given.get(name) {
            None => bad.push(format!("{name} (missing)")),
            Some(g) if g.shape() != t.shape() => {
                bad.push(format!("{name} (shape {:?}, expected {:?})", g.shape(), t.shape()))
            }
            _ => {}
        }
    }
    let known: std::collections::HashSet<&str> = expected.iter().map(|(n, _)| n.as_str()).collect();
    let mut extra: Vec<&String> = given.keys().filter(|k| !known.contains(k.as_str())).collect();
    extra.sort();
    bad.extend(extra.into_iter().map(|n| format!("{n} (unexpected)")));
    if !bad.is_empty() {
        return Err(Error::Incompatible(bad));
    }
    for p in model.params.iter_mut() {
        p.value = given.remove(&p.name).expect("validated");
    }
    for (name, stats) in model.buffers.iter_mut() {
        *stats = BnStats {
            running_mean: given.remove(&format!("{name}.running_mean")).expect("validated"),
            running_var: given.remove(&format!("{name}.running_var")).expect("validated"),
        };
    }
    Ok(())
}

pub fn save(path: impl AsRef<Path>, model: &Model) -> Result<()> {
    Ok(fs::write(path, encode(&named_tensors(model))?)?)
}

/// Loads a checkpoint file into `model` (all or nothing).
pub fn load_into(path: impl AsRef<Path>, model: &mut Model) -> Result<()> {
    let bytes = fs::read(path)?;
    apply(model, decode(&bytes)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::NetworkConfig;

    fn tiny() -> NetworkConfig {
        NetworkConfig {
            embed_dims: [2, 3, 4, 5, 6],
            man_depths: [1, 1, 1],
            msab_kernels: vec![3],
            ..NetworkConfig::desk()
        }
    }

    fn rounded(seed: u64) -> Model {
        let mut m = Model::new(&tiny(), seed).unwrap();
        m.params.round_to_f32();
        m.buffers.round_to_f32();
        m
    }

    #[test]
    fn round_trip_is_exact_after_rounding() {
        let m = rounded(0);
        let bytes = encode(&named_tensors(&m)).unwrap();
        let mut other = Model::new(&tiny(), 99).unwrap();
        apply(&mut other, decode(&bytes).unwrap()).unwrap();
        assert_eq!(other.params, m.params);
        assert_eq!(other.buffers, m.buffers);
        assert_eq!(encode(&named_tensors(&other)).unwrap(), bytes);
    }

    #[test]
    fn scalars_and_stats_are_stored() {
        let m = rounded(0);
        let names: Vec<String> = named_tensors(&m).into_iter().map(|(n, _)| n).collect();
        assert!(names.contains(&"enc4.w1".to_string()));
        assert!(names.contains(&"enc1.0.bn.running_var".to_string()));
    }

    #[test]
    fn every_truncation_fails() {
        let bytes = encode(&named_tensors(&rounded(1))).unwrap();
        for cut in [0, 3, 5, 8, 20, bytes.len() / 2, bytes.len() - 1] {
            assert!(matches!(decode(&bytes[..cut]), Err(Error::Checkpoint(_))), "cut {cut}");
        }
        let mut long = bytes.clone();
        long.push(0);
        assert!(decode(&long).is_err());
    }

    #[test]
    fn mismatch_lists_names_and_leaves_model_untouched() {
        let m = rounded(0);
        let mut tensors = named_tensors(&m);
        tensors.retain(|(n, _)| n != "head.bias");
        tensors[0].1 = Tensor::zeros(&[1]);
        tensors.push(("ghost".into(), Tensor::zeros(&[1])));
        let mut target = rounded(5);
        let before = target.params.clone();
        match apply(&mut target, tensors) {
            Err(Error::Incompatible(names)) => {
                let joined = names.join(",");
                assert!(joined.contains("head.bias (missing)"));
                assert!(joined.contains("ghost (unexpected)"));
                assert!(joined.contains(&m.params.iter().next().unwrap().name));
            }
            other => panic!("expected incompatibility, got {other:?}"),
        }
        assert_eq!(target.params, before);
    }
}
