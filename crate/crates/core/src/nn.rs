//! Named parameters and the layer building blocks shared by every model.

use std::collections::{BTreeMap, HashMap};

use rand::Rng;
use sha2::{Digest, Sha256};

use crate::error::{dim_err, Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::{Real, Tensor};

/// Flat, name-ordered parameter collection. Names are dotted paths whose first
/// segment is the namespace (`backbone`, `plm`, `pmm`, `samf`).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Contract(format!("missing parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor> {
        self.tensors.remove(name)
    }

    pub fn has_namespace(&self, ns: &str) -> bool {
        let prefix = format!("{ns}.");
        self.tensors.keys().any(|k| k.starts_with(&prefix))
    }

    /// Total scalar count of tensors whose name starts with `prefix`.
    pub fn count(&self, prefix: &str) -> usize {
        self.tensors
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(_, t)| t.len())
            .sum()
    }

    /// Moves every tensor of `other` into `self`, replacing same-named ones.
    pub fn extend(&mut self, other: ParamStore) {
        self.tensors.extend(other.tensors);
    }

    pub fn subset(&self, prefix: &str) -> ParamStore {
        ParamStore {
            tensors: self
                .tensors
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    /// SHA-256 over names, shapes and little-endian values of tensors under `prefix`.
    pub fn checksum(&self, prefix: &str) -> String {
        let mut h = Sha256::new();
        for (k, t) in self.tensors.iter().filter(|(k, _)| k.starts_with(prefix)) {
            h.update(k.as_bytes());
            for d in t.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in t.data() {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Registers every tensor on `tape`; `trainable` decides which ones
    /// require grad.
    pub fn bind<T: Real>(&self, tape: &mut Tape<T>, trainable: impl Fn(&str) -> bool) -> Bound {
        let mut vars = HashMap::with_capacity(self.tensors.len());
        for (k, t) in &self.tensors {
            let v = tape.leaf(t.cast(), trainable(k));
            vars.insert(k.clone(), v);
        }
        Bound { vars }
    }
}

/// Parameter name → tape variable for one forward pass.
#[derive(Clone, Debug, Default)]
pub struct Bound {
    vars: HashMap<String, Var>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Contract(format!("parameter `{name}` not bound")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    pub fn from_pairs(pairs: impl IntoIterator<Item = (String, Var)>) -> Self {
        Self { vars: pairs.into_iter().collect() }
    }

    pub fn extend(&mut self, other: Bound) {
        self.vars.extend(other.vars);
    }
}

// ---- initialization -------------------------------------------------------

pub fn init_linear<R: Rng>(store: &mut ParamStore, rng: &mut R, prefix: &str, fan_in: usize, fan_out: usize) {
    let bound = (6.0 / (fan_in + fan_out) as f32).sqrt();
    store.insert(format!("{prefix}.w"), Tensor::uniform(&[fan_in, fan_out], bound, rng));
    store.insert(format!("{prefix}.b"), Tensor::zeros(&[fan_out]));
}

pub fn init_linear_zero(store: &mut ParamStore, prefix: &str, fan_in: usize, fan_out: usize) {
    store.insert(format!("{prefix}.w"), Tensor::zeros(&[fan_in, fan_out]));
    store.insert(format!("{prefix}.b"), Tensor::zeros(&[fan_out]));
}

pub fn init_layer_norm(store: &mut ParamStore, prefix: &str, c: usize) {
    store.insert(format!("{prefix}.g"), Tensor::ones(&[c]));
    store.insert(format!("{prefix}.b"), Tensor::zeros(&[c]));
}

/// Attention projecting `c` channels into an `inner`-wide space and back.
pub fn init_attention<R: Rng>(store: &mut ParamStore, rng: &mut R, prefix: &str, c: usize, inner: usize) {
    for p in ["q", "k", "v"] {
        init_linear(store, rng, &format!("{prefix}.{p}"), c, inner);
    }
    init_linear(store, rng, &format!("{prefix}.o"), inner, c);
}

/// Layer widths `dims[0] → dims[1] → … → dims[n]`, ReLU between layers.
pub fn init_mlp<R: Rng>(store: &mut ParamStore, rng: &mut R, prefix: &str, dims: &[usize]) {
    for (i, w) in dims.windows(2).enumerate() {
        init_linear(store, rng, &format!("{prefix}.{i}"), w[0], w[1]);
    }
}

// ---- layers ---------------------------------------------------------------

pub fn linear<T: Real>(tape: &mut Tape<T>, b: &Bound, prefix: &str, x: Var) -> Result<Var> {
    let w = b.get(&format!("{prefix}.w"))?;
    let bias = b.get(&format!("{prefix}.b"))?;
    let y = tape.matmul(x, w)?;
    tape.add_row(y, bias)
}

pub fn layer_norm<T: Real>(tape: &mut Tape<T>, b: &Bound, prefix: &str, x: Var) -> Result<Var> {
    let g = b.get(&format!("{prefix}.g"))?;
    let bias = b.get(&format!("{prefix}.b"))?;
    tape.layer_norm(x, g, bias, 1e-5)
}

pub fn mlp<T: Real>(tape: &mut Tape<T>, b: &Bound, prefix: &str, x: Var, layers: usize) -> Result<Var> {
    let mut h = x;
    for i in 0..layers {
        h = linear(tape, b, &format!("{prefix}.{i}"), h)?;
        if i + 1 < layers {
            h = tape.relu(h);
        }
    }
    Ok(h)
}

/// Scaled dot-product attention with projection weights `{prefix}.{q,k,v,o}`.
///
/// `q_in` is `n_q × C`, `k_in`/`v_in` are `n_k × C`; the result is `n_q × C`.
/// Each head attends with scale `1/√head_dim`.
pub fn attention<T: Real>(tape: &mut Tape<T>, b: &Bound, prefix: &str, q_in: Var, k_in: Var, v_in: Var, heads: usize) -> Result<Var> {
    let q = linear(tape, b, &format!("{prefix}.q"), q_in)?;
    let k = linear(tape, b, &format!("{prefix}.k"), k_in)?;
    let v = linear(tape, b, &format!("{prefix}.v"), v_in)?;
    let inner = tape.value(q).cols();
    if heads == 0 || !inner.is_multiple_of(heads) {
        return Err(Error::Config(format!("attention width {inner} not divisible by {heads} heads")));
    }
    if tape.value(k).rows() != tape.value(v).rows() {
        return Err(dim_err!("attention keys/values row mismatch"));
    }
    let hd = inner / heads;
    let scale = 1.0 / (hd as f32).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (s, e) = (h * hd, (h + 1) * hd);
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            (tape.slice_cols(q, s, e)?, tape.slice_cols(k, s, e)?, tape.slice_cols(v, s, e)?)
        };
        let logits = tape.matmul_nt(qh, kh)?;
        let logits = tape.scale(logits, scale);
        let att = tape.softmax(logits);
        outs.push(tape.matmul(att, vh)?);
    }
    let cat = if heads == 1 { outs[0] } else { tape.concat_cols(&outs)? };
    linear(tape, b, &format!("{prefix}.o"), cat)
}
