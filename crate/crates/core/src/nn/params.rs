use std::collections::HashMap;
use std::io::{Read, Write};

use rand::Rng;

use super::Real;
use crate::error::{Error, Result};

pub const ARCHIVE_MAGIC: &[u8; 8] = b"FSRPARAM";
pub const ARCHIVE_VERSION: u32 = 1;

pub type ParamId = usize;

/// A named tensor with its gradient accumulator and AdamW state.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameter<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<T>,
    pub grad: Vec<T>,
    pub m: Vec<T>,
    pub v: Vec<T>,
    pub step: u64,
}

impl<T: Real> Parameter<T> {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, value: Vec<T>) -> Self {
        let n = value.len();
        assert_eq!(n, shape.iter().product::<usize>(), "value length does not match shape");
        Parameter {
            name: name.into(),
            shape,
            value,
            grad: vec![T::zero(); n],
            m: vec![T::zero(); n],
            v: vec![T::zero(); n],
            step: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore<T> {
    params: Vec<Parameter<T>>,
    index: HashMap<String, ParamId>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            params: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn insert(&mut self, p: Parameter<T>) -> Result<ParamId> {
        if self.index.contains_key(&p.name) {
            return Err(Error::InvalidArgument(format!("duplicate parameter {}", p.name)));
        }
        let id = self.params.len();
        self.index.insert(p.name.clone(), id);
        self.params.push(p);
        Ok(id)
    }

    pub fn zeros(&mut self, name: &str, shape: Vec<usize>) -> ParamId {
        let n = shape.iter().product();
        self.insert(Parameter::new(name, shape, vec![T::zero(); n]))
            .expect("parameter names are unique")
    }

    pub fn filled(&mut self, name: &str, shape: Vec<usize>, v: f64) -> ParamId {
        let n = shape.iter().product();
        self.insert(Parameter::new(name, shape, vec![T::of(v); n]))
            .expect("parameter names are unique")
    }

    /// Uniform in `±sqrt(3 / fan_in)`, i.e. unit variance per fan-in.
    pub fn fan_in_uniform(&mut self, name: &str, shape: Vec<usize>, fan_in: usize, rng: &mut impl Rng) -> ParamId {
        let n: usize = shape.iter().product();
        let bound = (3.0 / fan_in.max(1) as f64).sqrt();
        let value = (0..n).map(|_| T::of(rng.random_range(-bound..bound))).collect();
        self.insert(Parameter::new(name, shape, value))
            .expect("parameter names are unique")
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id]
    }

    pub fn by_name(&self, name: &str) -> Option<&Parameter<T>> {
        self.id(name).map(|i| &self.params[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<T>> {
        self.params.iter_mut()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.iter_mut().for_each(|g| *g = T::zero());
        }
    }

    pub fn scale_grad(&mut self, s: T) {
        for p in &mut self.params {
            p.grad.iter_mut().for_each(|g| *g *= s);
        }
    }

    pub fn num_values(&self) -> usize {
        self.params.iter().map(Parameter::len).sum()
    }

    /// Converts values (and optimizer state) to another precision.
    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        let conv = |v: &[T]| v.iter().map(|x| U::of(x.f64())).collect::<Vec<U>>();
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Parameter {
                    name: p.name.clone(),
                    shape: p.shape.clone(),
                    value: conv(&p.value),
                    grad: conv(&p.grad),
                    m: conv(&p.m),
                    v: conv(&p.v),
                    step: p.step,
                })
                .collect(),
            index: self.index.clone(),
        }
    }

    /// Overwrites values from archive records; every record must name an
    /// existing parameter of the same shape.
    pub fn load_values(&mut self, records: &[(String, Vec<usize>, Vec<f32>)]) -> Result<()> {
        for (name, shape, values) in records {
            let id = self
                .id(name)
                .ok_or_else(|| Error::CorruptArchive(format!("unknown parameter {name}")))?;
            let p = &mut self.params[id];
            if &p.shape != shape {
                return Err(Error::CorruptArchive(format!(
                    "parameter {name} has shape {shape:?}, expected {:?}",
                    p.shape
                )));
            }
            p.value = values.iter().map(|&v| T::of(v as f64)).collect();
        }
        Ok(())
    }

    /// `(name, shape, values)` records in insertion order.
    pub fn records(&self) -> Vec<(String, Vec<usize>, Vec<f32>)> {
        self.params
            .iter()
            .map(|p| (p.name.clone(), p.shape.clone(), p.value.iter().map(|v| v.f64() as f32).collect()))
            .collect()
    }
}

/// Serializes records as: magic, version, count, then per record
/// `name_len, name, rank, dims..., f32 values` (all little-endian u32/f32).
pub fn write_archive(w: &mut impl Write, records: &[(String, Vec<usize>, Vec<f32>)]) -> std::io::Result<()> {
    w.write_all(ARCHIVE_MAGIC)?;
    w.write_all(&ARCHIVE_VERSION.to_le_bytes())?;
    w.write_all(&(records.len() as u32).to_le_bytes())?;
    for (name, shape, values) in records {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(shape.len() as u32).to_le_bytes())?;
        for &d in shape {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for v in values {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_exact(r: &mut impl Read, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| Error::CorruptArchive(format!("truncated while reading {what}")))
}

fn read_u32(r: &mut impl Read, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

pub fn read_archive(r: &mut impl Read) -> Result<Vec<(String, Vec<usize>, Vec<f32>)>> {
    let mut magic = [0u8; 8];
    read_exact(r, &mut magic, "magic")?;
    if &magic != ARCHIVE_MAGIC {
        return Err(Error::CorruptArchive("bad parameter archive magic".into()));
    }
    let version = read_u32(r, "version")?;
    if version != ARCHIVE_VERSION {
        return Err(Error::Version {
            found: version,
            expected: ARCHIVE_VERSION,
        });
    }
    let count = read_u32(r, "record count")?;
    let mut out = Vec::with_capacity(count.min(1 << 16) as usize);
    for _ in 0..count {
        let name_len = read_u32(r, "name length")? as usize;
        if name_len > 1 << 16 {
            return Err(Error::CorruptArchive(format!("implausible name length {name_len}")));
        }
        let mut name = vec![0u8; name_len];
        read_exact(r, &mut name, "name")?;
        let name = String::from_utf8(name).map_err(|_| Error::CorruptArchive("name is not utf-8".into()))?;
        let rank = read_u32(r, "rank")? as usize;
        if rank > 8 {
            return Err(Error::CorruptArchive(format!("implausible rank {rank} for {name}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u32(r, "dims")? as usize);
        }
        let n: usize = shape.iter().product();
        if n > 1 << 28 {
            return Err(Error::CorruptArchive(format!("implausible size {n} for {name}")));
        }
        let mut bytes = vec![0u8; 4 * n];
        read_exact(r, &mut bytes, "values")?;
        let values = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        out.push((name, shape, values));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn archive_round_trip_is_bit_exact(vals in proptest::collection::vec(any::<u32>(), 0..64), rows in 1usize..4) {
            let floats: Vec<f32> = vals.iter().map(|&b| f32::from_bits(b)).collect();
            let cols = floats.len() / rows;
            let recs = vec![
                ("a.w".to_string(), vec![rows, cols], floats[..rows * cols].to_vec()),
                ("b".to_string(), vec![], vec![1.5f32]),
            ];
            let mut buf = Vec::new();
            write_archive(&mut buf, &recs).unwrap();
            let back = read_archive(&mut buf.as_slice()).unwrap();
            prop_assert_eq!(back.len(), 2);
            for ((n0, s0, v0), (n1, s1, v1)) in recs.iter().zip(&back) {
                prop_assert_eq!(n0, n1);
                prop_assert_eq!(s0, s1);
                prop_assert_eq!(v0.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), v1.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
            }
        }
    }

    #[test]
    fn truncated_and_foreign_archives_are_rejected() {
        let recs = vec![("w".to_string(), vec![2, 2], vec![1.0f32, 2.0, 3.0, 4.0])];
        let mut buf = Vec::new();
        write_archive(&mut buf, &recs).unwrap();
        for cut in [0, 5, 12, buf.len() - 1] {
            assert!(matches!(read_archive(&mut &buf[..cut]), Err(Error::CorruptArchive(_))));
        }
        let mut wrong = buf.clone();
        wrong[8] = 9;
        assert!(matches!(read_archive(&mut wrong.as_slice()), Err(Error::Version { found: 9, .. })));
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParamStore::<f32>::new();
        s.zeros("a", vec![2]);
        assert!(s.insert(Parameter::new("a", vec![1], vec![0.0])).is_err());
    }
}
