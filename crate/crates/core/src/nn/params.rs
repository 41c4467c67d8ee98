//! Named parameter storage and the checkpoint format.
//!
//! A checkpoint is `"CKPT1"`, a `u32` tensor count, then per tensor a `u16`
//! name length, the UTF-8 name, a `u8` rank, `u32` dims and `f32` data, all
//! little-endian.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use rand::distributions::{Distribution, Uniform};

use crate::error::{Error, Result};
use crate::nn::{Graph, Tensor, Var};

const CKPT_MAGIC: &[u8; 5] = b"CKPT1";

#[derive(Debug, Clone)]
struct Entry {
    value: Tensor<f32>,
    grad: Vec<f32>,
    trainable: bool,
}

/// Trainable parameters, frozen parameters and non-trainable buffers
/// (batch-norm running statistics), in insertion order.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    names: Vec<String>,
    entries: BTreeMap<String, Entry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    fn insert(&mut self, name: &str, value: Tensor<f32>, trainable: bool) {
        let grad = vec![0.0; value.numel()];
        if self
            .entries
            .insert(name.to_string(), Entry { value, grad, trainable })
            .is_none()
        {
            self.names.push(name.to_string());
        }
    }

    pub fn add_param(&mut self, name: &str, value: Tensor<f32>) {
        self.insert(name, value, true);
    }

    pub fn add_buffer(&mut self, name: &str, value: Tensor<f32>) {
        self.insert(name, value, false);
    }

    /// Kaiming-uniform init for a weight with the given fan-in.
    pub fn add_kaiming<R: Rng + ?Sized>(&mut self, name: &str, shape: &[usize], fan_in: usize, rng: &mut R) {
        let bound = (6.0 / fan_in.max(1) as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound);
        let data = (0..shape.iter().product::<usize>())
            .map(|_| dist.sample(rng) as f32)
            .collect();
        self.add_param(name, Tensor::new(shape, data).expect("sized"));
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    fn entry(&self, name: &str) -> &Entry {
        self.entries
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    fn entry_mut(&mut self, name: &str) -> &mut Entry {
        self.entries
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn get(&self, name: &str) -> &Tensor<f32> {
        &self.entry(name).value
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor<f32> {
        &mut self.entry_mut(name).value
    }

    pub fn grad(&self, name: &str) -> &[f32] {
        &self.entry(name).grad
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        self.entry(name).trainable
    }

    pub fn set_trainable(&mut self, name: &str, trainable: bool) {
        self.entry_mut(name).trainable = trainable;
    }

    /// Names of trainable parameters, in insertion order.
    pub fn trainable(&self) -> impl Iterator<Item = &str> {
        self.names
            .iter()
            .filter(|n| self.entries[n.as_str()].trainable)
            .map(String::as_str)
    }

    pub fn num_trainable(&self) -> usize {
        self.trainable().map(|n| self.get(n).numel()).sum()
    }

    pub fn zero_grad(&mut self) {
        for e in self.entries.values_mut() {
            e.grad.fill(0.0);
        }
    }

    /// Adds `g` into the accumulated gradient of `name`.
    pub fn accumulate_grad(&mut self, name: &str, g: &[f32]) {
        let e = self.entry_mut(name);
        for (a, b) in e.grad.iter_mut().zip(g) {
            *a += *b;
        }
    }

    pub fn scale_grads(&mut self, s: f32) {
        for e in self.entries.values_mut() {
            e.grad.iter_mut().for_each(|g| *g *= s);
        }
    }

    pub fn grad_norm(&self) -> f64 {
        self.trainable()
            .flat_map(|n| self.grad(n).iter())
            .map(|&g| f64::from(g).powi(2))
            .sum::<f64>()
            .sqrt()
    }

    /// Rescales gradients so their global L2 norm is at most `max_norm`.
    /// Returns the norm before clipping.
    pub fn clip_grad_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.grad_norm();
        if norm > max_norm && norm.is_finite() {
            self.scale_grads((max_norm / norm) as f32);
        }
        norm
    }

    /// Places a parameter on a graph, as a leaf that tracks gradients when
    /// trainable.
    pub fn var<T: crate::nn::Real>(&self, g: &mut Graph<T>, name: &str) -> Var {
        let e = self.entry(name);
        g.leaf(e.value.cast(), e.trainable)
    }

    /// Writes every tensor in insertion order.
    pub fn write_checkpoint<W: Write>(&self, mut w: W) -> Result<()> {
        let io = |e: std::io::Error| Error::Checkpoint(e.to_string());
        w.write_all(CKPT_MAGIC).map_err(io)?;
        w.write_all(&(self.names.len() as u32).to_le_bytes()).map_err(io)?;
        for name in &self.names {
            let t = &self.entries[name].value;
            w.write_all(&(name.len() as u16).to_le_bytes()).map_err(io)?;
            w.write_all(name.as_bytes()).map_err(io)?;
            w.write_all(&[t.rank() as u8]).map_err(io)?;
            for &d in t.shape() {
                w.write_all(&(d as u32).to_le_bytes()).map_err(io)?;
            }
            let mut buf = Vec::with_capacity(t.numel() * 4);
            for v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&buf).map_err(io)?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_checkpoint(std::io::BufWriter::new(f))
    }

    /// Loads a checkpoint into an already-constructed store. Every tensor
    /// in the store must be present with the same shape, and no extras are
    /// allowed.
    pub fn read_checkpoint<R: Read>(&mut self, mut r: R) -> Result<()> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
        let tensors = parse_checkpoint(&bytes)?;
        let mut seen = std::collections::HashSet::new();
        for (name, shape, data) in tensors {
            let Some(entry) = self.entries.get_mut(&name) else {
                return Err(Error::Checkpoint(format!("unexpected tensor {name}")));
            };
            if entry.value.shape() != shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "tensor {name}: expected shape {:?}, found {shape:?}",
                    entry.value.shape()
                )));
            }
            entry.value = Tensor::new(&shape, data)?;
            seen.insert(name);
        }
        if let Some(missing) = self.names.iter().find(|n| !seen.contains(*n)) {
            return Err(Error::Checkpoint(format!("missing tensor {missing}")));
        }
        Ok(())
    }

    pub fn load(&mut self, path: &Path) -> Result<()> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        self.read_checkpoint(std::io::BufReader::new(f))
    }
}

type RawTensor = (String, Vec<usize>, Vec<f32>);

fn parse_checkpoint(bytes: &[u8]) -> Result<Vec<RawTensor>> {
    struct Cursor<'a> {
        b: &'a [u8],
        pos: usize,
    }
    impl<'a> Cursor<'a> {
        fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
            if self.pos + n > self.b.len() {
                return Err(Error::Checkpoint(format!(
                    "truncated at byte {} reading {what}",
                    self.pos
                )));
            }
            let s = &self.b[self.pos..self.pos + n];
            self.pos += n;
            Ok(s)
        }
        fn u32(&mut self, what: &str) -> Result<u32> {
            Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
        }
    }
    let mut c = Cursor { b: bytes, pos: 0 };
    if c.take(5, "magic")? != CKPT_MAGIC {
        return Err(Error::Checkpoint("bad magic, expected CKPT1".into()));
    }
    let count = c.u32("tensor count")?;
    let mut out = Vec::with_capacity(count as usize);
    for i in 0..count {
        let nlen = u16::from_le_bytes(c.take(2, "name length")?.try_into().unwrap());
        let name = std::str::from_utf8(c.take(nlen as usize, "name")?)
            .map_err(|_| Error::Checkpoint(format!("tensor {i}: name is not UTF-8")))?
            .to_string();
        let rank = c.take(1, &name)?[0];
        let shape = (0..rank)
            .map(|_| c.u32(&name).map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let data = c
            .take(n * 4, &name)?
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        out.push((name, shape, data));
    }
    if c.pos != bytes.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes",
            bytes.len() - c.pos
        )));
    }
    Ok(out)
}
