//! Named parameters, Adam, and the `MPCK` checkpoint format.
//!
//! ```text
//! b"MPCK" | u32 count | count x ( u16 name_len | name bytes (UTF-8) | MTK1 tensor )
//! ```
//!
//! Adam moments are not stored; a resumed run restarts the optimizer cold.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use indexmap::IndexMap;

use crate::attention::{BlockParams, LayerNormParams, MhaParams, MlpParams, ScaBranch};
use crate::error::{Error, Result};
use crate::io::{read_tensor, write_tensor};
use crate::sca::{ClusterState, ScaParams};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MPCK";

/// Structured parameter containers expose their tensors in a fixed order
/// under dotted names.
pub trait Params {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor));
    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Tensor));

    /// `(name, tensor)` pairs in visiting order.
    fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        self.visit("", &mut |n, t| out.push((n, t)));
        out
    }

    fn num_elements(&self) -> usize {
        self.named().iter().map(|(_, t)| t.len()).sum()
    }
}

pub(crate) fn join(prefix: &str, field: &str) -> String {
    if prefix.is_empty() {
        field.to_string()
    } else {
        format!("{prefix}.{field}")
    }
}

impl Params for Tensor {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        f(prefix.to_string(), self)
    }
    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Tensor)) {
        f(prefix.to_string(), self)
    }
}

impl<T: Params> Params for Option<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        if let Some(p) = self {
            p.visit(prefix, f)
        }
    }
    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Tensor)) {
        if let Some(p) = self {
            p.visit_mut(prefix, f)
        }
    }
}

impl<T: Params> Params for Vec<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        for (i, p) in self.iter().enumerate() {
            p.visit(&join(prefix, &i.to_string()), f)
        }
    }
    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Tensor)) {
        for (i, p) in self.iter_mut().enumerate() {
            p.visit_mut(&join(prefix, &i.to_string()), f)
        }
    }
}

macro_rules! impl_params {
    ($ty:ty { $($field:ident),* $(,)? }) => {
        impl $crate::grad::Params for $ty {
            fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a $crate::tensor::Tensor)) {
                $( self.$field.visit(&$crate::grad::store::join(prefix, stringify!($field)), f); )*
            }
            fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut $crate::tensor::Tensor)) {
                $( self.$field.visit_mut(&$crate::grad::store::join(prefix, stringify!($field)), f); )*
            }
        }
    };
}
pub(crate) use impl_params;

impl_params!(LayerNormParams { gamma, beta });
impl_params!(MhaParams { wq, wk, wv, wo, rel_bias });
impl_params!(MlpParams { w1, b1, w2, b2 });
impl_params!(ClusterState { cores, lambda, mu });
impl_params!(ScaParams { wq, wk, wv });
impl_params!(ScaBranch { norm, clusters, proj });
impl_params!(BlockParams { norm_attn, attn, sca, norm_mlp, mlp });

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry {
    pub value: Tensor,
    pub grad: Tensor,
    pub m: Tensor,
    pub v: Tensor,
    pub step: u64,
}

impl ParamEntry {
    fn new(value: Tensor) -> Self {
        let z = Tensor::zeros(value.shape());
        ParamEntry { grad: z.clone(), m: z.clone(), v: z, value, step: 0 }
    }
}

/// Ordered map of named parameters with gradient and Adam slots.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: IndexMap<String, ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_params(p: &impl Params) -> Result<Self> {
        let mut s = Self::new();
        for (name, t) in p.named() {
            s.insert(name, t.clone())?;
        }
        Ok(s)
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        let name = name.into();
        if name.len() > u16::MAX as usize {
            return Err(Error::Argument(format!("parameter name too long: {} bytes", name.len())));
        }
        if self.entries.contains_key(&name) {
            return Err(Error::Argument(format!("duplicate parameter '{name}'")));
        }
        self.entries.insert(name, ParamEntry::new(value));
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&ParamEntry> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut ParamEntry> {
        self.entries.get_mut(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ParamEntry)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn num_elements(&self) -> usize {
        self.entries.values().map(|e| e.value.len()).sum()
    }

    /// Adds a gradient container (same structure as the stored parameters)
    /// into the gradient slots.
    pub fn accumulate(&mut self, grads: &impl Params) -> Result<()> {
        let mut err = None;
        grads.visit("", &mut |name, g| {
            if err.is_some() {
                return;
            }
            match self.entries.get_mut(&name) {
                Some(e) => {
                    if let Err(e) = e.grad.add_assign(g) {
                        err = Some(e);
                    }
                }
                None => err = Some(Error::Argument(format!("gradient for unknown parameter '{name}'"))),
            }
        });
        err.map_or(Ok(()), Err)
    }

    pub fn scale_grads(&mut self, s: f64) {
        for e in self.entries.values_mut() {
            e.grad = e.grad.scale(s);
        }
    }

    pub fn zero_grads(&mut self) {
        for e in self.entries.values_mut() {
            e.grad.data_mut().fill(0.0);
        }
    }

    /// Copies stored values into a parameter container by name.
    pub fn write_to(&self, p: &mut impl Params) -> Result<()> {
        let mut err = None;
        p.visit_mut("", &mut |name, t| {
            if err.is_some() {
                return;
            }
            match self.entries.get(&name) {
                Some(e) if e.value.shape() == t.shape() => t.data_mut().copy_from_slice(e.value.data()),
                Some(e) => {
                    err = Some(Error::Shape(format!(
                        "parameter '{name}' has shape {:?}, expected {:?}",
                        e.value.shape(),
                        t.shape()
                    )))
                }
                None => err = Some(Error::Format(format!("checkpoint lacks parameter '{name}'"))),
            }
        });
        err.map_or(Ok(()), Err)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// One bias-corrected Adam update of every entry; gradients are zeroed after.
pub fn adam_step(store: &mut ParamStore, cfg: &AdamConfig) {
    for e in store.entries.values_mut() {
        e.step += 1;
        let t = e.step as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        let (g, m, v, x) = (e.grad.data_mut(), e.m.data_mut(), e.v.data_mut(), e.value.data_mut());
        for i in 0..g.len() {
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
            let mh = m[i] / bc1;
            let vh = v[i] / bc2;
            x[i] -= cfg.lr * mh / (vh.sqrt() + cfg.eps);
            g[i] = 0.0;
        }
    }
}

pub fn write_checkpoint<W: Write>(w: &mut W, store: &ParamStore) -> Result<()> {
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&(store.len() as u32).to_le_bytes())?;
    for (name, e) in store.iter() {
        w.write_all(&(name.len() as u16).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        write_tensor(w, &e.value)?;
    }
    Ok(())
}

pub fn read_checkpoint<R: Read>(r: &mut R) -> Result<ParamStore> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Format(format!("bad checkpoint magic {magic:?}, expected MPCK")));
    }
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4)?;
    let count = u32::from_le_bytes(b4);
    let mut store = ParamStore::new();
    for _ in 0..count {
        let mut b2 = [0u8; 2];
        r.read_exact(&mut b2)?;
        let mut name = vec![0u8; u16::from_le_bytes(b2) as usize];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| Error::Format("parameter name is not UTF-8".into()))?;
        let value = read_tensor(r)?;
        store.insert(name, value).map_err(|e| Error::Format(e.to_string()))?;
    }
    Ok(store)
}

pub fn save_checkpoint(path: impl AsRef<Path>, store: &ParamStore) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_checkpoint(&mut w, store)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ParamStore> {
    let path = path.as_ref();
    let f =
        File::open(path).map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
    read_checkpoint(&mut BufReader::new(f))
}
