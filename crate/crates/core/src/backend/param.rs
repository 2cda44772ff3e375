use std::io::{Read, Write};

use sha2::{Digest, Sha256};

use super::{BackendError, Tensor};

/// Named trainable tensors. Names are unique and shapes never change.
#[derive(Clone, Debug, Default)]
pub struct ParameterSet {
    entries: Vec<(String, Tensor)>,
}

const MAGIC: &[u8; 8] = b"SAPARAM1";

impl ParameterSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a parameter. Panics on a duplicate name.
    pub fn insert(&mut self, name: impl Into<String>, shape: &[usize], values: Vec<f64>) {
        let name = name.into();
        assert!(self.get(&name).is_none(), "duplicate parameter name {name}");
        self.entries.push((name, Tensor::leaf(shape, values, true)));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Panicking lookup for names fixed by the network layout.
    pub fn tensor(&self, name: &str) -> &Tensor {
        self.get(name).unwrap_or_else(|| panic!("missing parameter {name}"))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.entries.iter().map(|(_, t)| t)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    /// Replaces the values of `name`, keeping its shape.
    pub fn set_values(&mut self, name: &str, values: Vec<f64>) {
        let slot = self.entries.iter_mut().find(|(n, _)| n == name).unwrap_or_else(|| panic!("missing parameter {name}"));
        assert_eq!(slot.1.len(), values.len(), "shape of {name} is fixed");
        slot.1 = Tensor::leaf(slot.1.shape(), values, true);
    }

    /// Deep copy whose tensors are distinct tape leaves.
    pub fn deep_copy(&self) -> Self {
        Self { entries: self.entries.iter().map(|(n, t)| (n.clone(), t.as_input())).collect() }
    }

    pub fn same_layout(&self, other: &Self) -> bool {
        self.entries.len() == other.entries.len()
            && self.entries.iter().zip(&other.entries).all(|((a, ta), (b, tb))| a == b && ta.shape() == tb.shape())
    }

    /// SHA-256 over names, shapes and the exact bit patterns of every value.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in &self.entries {
            h.update(name.as_bytes());
            for d in t.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in t.values() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn write_to(&self, mut w: impl Write) -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&(self.entries.len() as u64).to_le_bytes())?;
        for (name, t) in &self.entries {
            w.write_all(&(name.len() as u64).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(t.shape().len() as u64).to_le_bytes())?;
            for d in t.shape() {
                w.write_all(&(*d as u64).to_le_bytes())?;
            }
            for v in t.values() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self, BackendError> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(BackendError::Format("bad parameter file header".into()));
        }
        let count = read_u64(&mut r)? as usize;
        let mut set = ParameterSet::new();
        for _ in 0..count {
            let len = read_u64(&mut r)? as usize;
            if len > 4096 {
                return Err(BackendError::Format(format!("parameter name length {len}")));
            }
            let mut name = vec![0u8; len];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name).map_err(|e| BackendError::Format(e.to_string()))?;
            let ndim = read_u64(&mut r)? as usize;
            if ndim > 8 {
                return Err(BackendError::Format(format!("{name}: {ndim} dimensions")));
            }
            let shape = (0..ndim).map(|_| read_u64(&mut r).map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
            let n: usize = shape.iter().product();
            let mut buf = vec![0u8; n * 8];
            r.read_exact(&mut buf)?;
            let values = buf.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            if set.get(&name).is_some() {
                return Err(BackendError::Format(format!("duplicate parameter {name}")));
            }
            set.insert(name, &shape, values);
        }
        Ok(set)
    }
}

fn read_u64(r: &mut impl Read) -> std::io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

/// Adam with per-parameter moment buffers, keyed by position in the set.
#[derive(Debug, Clone)]
pub struct Adam {
    cfg: AdamConfig,
    step: u32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(cfg: AdamConfig, params: &ParameterSet) -> Self {
        let zeros: Vec<Vec<f64>> = params.tensors().map(|t| vec![0.0; t.len()]).collect();
        Self { cfg, step: 0, m: zeros.clone(), v: zeros }
    }

    pub fn step(&mut self, params: &mut ParameterSet, grads: &[Tensor]) {
        assert_eq!(grads.len(), params.len());
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.cfg;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (i, (entry, g)) in params.entries.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let updated = entry
                .1
                .values()
                .iter()
                .zip(g.values())
                .zip(m.iter_mut().zip(v.iter_mut()))
                .map(|((&p, &g), (m, v))| {
                    *m = beta1 * *m + (1.0 - beta1) * g;
                    *v = beta2 * *v + (1.0 - beta2) * g * g;
                    p - lr * (*m / bc1) / ((*v / bc2).sqrt() + eps)
                })
                .collect();
            entry.1 = Tensor::leaf(entry.1.shape(), updated, true);
        }
    }
}
