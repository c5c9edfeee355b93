//! Named parameter storage, graph binding, Adam, and the checkpoint container.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{Gradients, Graph, Var};
use crate::synth::mix_seed;
use crate::tensor::{Float, Tensor};

/// Index of a parameter in a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// Weight initialisation schemes.
#[derive(Clone, Copy, Debug)]
pub enum Init {
    Zeros,
    Ones,
    /// He-normal with the given fan-in.
    He(usize),
    Normal(f64),
}

struct Entry<T> {
    name: String,
    value: Tensor<T>,
    trainable: bool,
}

/// Ordered collection of named tensors. Non-trainable entries hold buffers
/// such as batch-norm running statistics.
pub struct ParamStore<T> {
    entries: Vec<Entry<T>>,
    by_name: HashMap<String, usize>,
    seed: u64,
}

impl<T: Float> ParamStore<T> {
    pub fn new(seed: u64) -> Self {
        ParamStore {
            entries: Vec::new(),
            by_name: HashMap::new(),
            seed,
        }
    }

    /// Registers a tensor. Initial values depend only on the store seed and
    /// registration order.
    pub fn add(&mut self, name: &str, shape: &[usize], init: Init, trainable: bool) -> ParamId {
        assert!(!self.by_name.contains_key(name), "duplicate parameter {name}");
        let idx = self.entries.len();
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(self.seed, idx as u64));
        let value = match init {
            Init::Zeros => Tensor::zeros(shape),
            Init::Ones => Tensor::full(shape, T::one()),
            Init::He(fan_in) => {
                let std = (2.0 / fan_in.max(1) as f64).sqrt();
                Tensor::from_fn(shape, |_| T::of(std * normal(&mut rng)))
            }
            Init::Normal(std) => Tensor::from_fn(shape, |_| T::of(std * normal(&mut rng))),
        };
        self.entries.push(Entry {
            name: name.to_string(),
            value,
            trainable,
        });
        self.by_name.insert(name.to_string(), idx);
        ParamId(idx)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn trainable(&self, id: ParamId) -> bool {
        self.entries[id.0].trainable
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    /// Ids whose name starts with `prefix`.
    pub fn with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = ParamId> + 'a {
        self.ids().filter(move |&id| self.name(id).starts_with(prefix))
    }

    pub fn num_trainable_scalars(&self) -> usize {
        self.entries.iter().filter(|e| e.trainable).map(|e| e.value.numel()).sum()
    }

    /// Converts every tensor to another scalar type.
    pub fn cast<U: Float>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| Entry {
                    name: e.name.clone(),
                    value: e.value.cast(),
                    trainable: e.trainable,
                })
                .collect(),
            by_name: self.by_name.clone(),
            seed: self.seed,
        }
    }
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Pending batch-norm running-statistics update produced by a training pass.
#[derive(Clone, Debug)]
pub struct StatUpdate {
    pub mean: ParamId,
    pub var: ParamId,
    pub batch_mean: Vec<f64>,
    pub batch_var: Vec<f64>,
    pub momentum: f64,
}

impl StatUpdate {
    /// Blends the batch statistics into the stored running statistics.
    pub fn apply<T: Float>(&self, store: &mut ParamStore<T>) {
        let m = self.momentum;
        for (dst, src) in [(self.mean, &self.batch_mean), (self.var, &self.batch_var)] {
            for (v, &b) in store.get_mut(dst).data_mut().iter_mut().zip(src) {
                *v = T::of((1.0 - m) * v.to_f64_lossy() + m * b);
            }
        }
    }
}

/// A graph bound to a parameter store. Parameters become graph leaves on
/// first use, so disabled sub-networks never enter the tape.
pub struct Session<'a, T: Float> {
    pub g: Graph<T>,
    store: &'a ParamStore<T>,
    vars: Vec<Option<Var>>,
    pub training: bool,
    pub stat_updates: Vec<StatUpdate>,
}

impl<'a, T: Float> Session<'a, T> {
    pub fn new(store: &'a ParamStore<T>, training: bool) -> Self {
        Session {
            g: Graph::new(),
            store,
            vars: vec![None; store.len()],
            training,
            stat_updates: Vec::new(),
        }
    }

    pub fn store(&self) -> &ParamStore<T> {
        self.store
    }

    /// Graph variable for a parameter.
    pub fn p(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.vars[id.0] {
            return v;
        }
        let t = self.store.get(id).clone();
        let v = if self.store.trainable(id) {
            self.g.param(t)
        } else {
            self.g.constant(t)
        };
        self.vars[id.0] = Some(v);
        v
    }

    /// Per-parameter gradients of `loss`. Parameters that never entered the
    /// graph get `None`.
    pub fn gradients(&self, loss: Var) -> Result<Vec<Option<Tensor<T>>>> {
        let mut grads: Gradients<T> = self.g.backward(loss)?;
        Ok(self
            .vars
            .iter()
            .map(|v| v.and_then(|v| grads.take(v)))
            .collect())
    }
}

/// Adam hyper-parameters.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam optimiser state: first/second moments per parameter.
pub struct Adam<T> {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Float> Adam<T> {
    pub fn new(store: &ParamStore<T>, config: AdamConfig) -> Self {
        let zeros = |id| Tensor::zeros(store.get(id).shape());
        Adam {
            config,
            step: 0,
            m: store.ids().map(zeros).collect(),
            v: store.ids().map(zeros).collect(),
        }
    }

    /// One update with learning rate `lr`. Missing gradients count as zero
    /// for the moments but leave the parameter untouched.
    pub fn update(&mut self, store: &mut ParamStore<T>, grads: &[Option<Tensor<T>>], lr: f64) {
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
        let (one_b1, one_b2) = (T::of(1.0 - c.beta1), T::of(1.0 - c.beta2));
        let step_size = T::of(lr / bc1);
        let inv_sqrt_bc2 = T::of(1.0 / bc2.sqrt());
        let eps = T::of(c.eps);
        for id in store.ids().collect::<Vec<_>>() {
            if !store.trainable(id) {
                continue;
            }
            let Some(g) = &grads[id.0] else { continue };
            let m = &mut self.m[id.0];
            let v = &mut self.v[id.0];
            let p = store.get_mut(id);
            for i in 0..g.numel() {
                let gi = g.data()[i];
                let mi = b1 * m.data()[i] + one_b1 * gi;
                let vi = b2 * v.data()[i] + one_b2 * gi * gi;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                p.data_mut()[i] -= step_size * mi / (vi.sqrt() * inv_sqrt_bc2 + eps);
            }
        }
    }
}

/// Everything persisted in a checkpoint file.
pub struct Checkpoint<T> {
    /// Free-form JSON describing the model that owns the parameters.
    pub model_config: String,
    pub step: u64,
    pub params: ParamStore<T>,
    pub adam: Option<Adam<T>>,
}

const CKPT_MAGIC: &[u8; 8] = b"BRNETCKP";
pub const CHECKPOINT_VERSION: u32 = 1;

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u64(out, s.len() as u64);
    out.extend_from_slice(s.as_bytes());
}

fn put_tensor<T: Float>(out: &mut Vec<u8>, t: &Tensor<T>) {
    put_u32(out, t.shape().len() as u32);
    for &d in t.shape() {
        put_u64(out, d as u64);
    }
    for &v in t.data() {
        if T::DTYPE == "f32" {
            out.extend_from_slice(&(v.to_f64_lossy() as f32).to_le_bytes());
        } else {
            out.extend_from_slice(&v.to_f64_lossy().to_le_bytes());
        }
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::parse("checkpoint", format!("truncated at byte {}", self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u64()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|e| Error::parse("checkpoint", e.to_string()))
    }

    fn tensor<T: Float>(&mut self, width: usize) -> Result<Tensor<T>> {
        let rank = self.u32()? as usize;
        if rank > 8 {
            return Err(Error::parse("checkpoint", format!("tensor rank {rank}")));
        }
        let shape = (0..rank).map(|_| self.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let n = n.filter(|&n| n.saturating_mul(width) <= self.bytes.len() - self.pos);
        let n = n.ok_or_else(|| Error::parse("checkpoint", "tensor larger than file"))?;
        let raw = self.take(n * width)?;
        let data = raw
            .chunks(width)
            .map(|c| {
                if width == 4 {
                    T::of(f32::from_le_bytes(c.try_into().expect("4")) as f64)
                } else {
                    T::of(f64::from_le_bytes(c.try_into().expect("8")))
                }
            })
            .collect();
        Tensor::from_vec(&shape, data)
    }
}

impl<T: Float> Checkpoint<T> {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CKPT_MAGIC);
        put_u32(&mut out, CHECKPOINT_VERSION);
        put_str(&mut out, T::DTYPE);
        put_str(&mut out, &self.model_config);
        put_u64(&mut out, self.step);
        put_u64(&mut out, self.params.seed);
        put_u64(&mut out, self.params.len() as u64);
        for id in self.params.ids() {
            put_str(&mut out, self.params.name(id));
            out.push(self.params.trainable(id) as u8);
            put_tensor(&mut out, self.params.get(id));
        }
        match &self.adam {
            None => out.push(0),
            Some(adam) => {
                out.push(1);
                for v in [adam.config.beta1, adam.config.beta2, adam.config.eps] {
                    out.extend_from_slice(&v.to_le_bytes());
                }
                put_u64(&mut out, adam.step);
                for (m, v) in adam.m.iter().zip(&adam.v) {
                    put_tensor(&mut out, m);
                    put_tensor(&mut out, v);
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut c = Cursor { bytes, pos: 0 };
        if c.take(8)? != CKPT_MAGIC {
            return Err(Error::parse("checkpoint", "bad magic"));
        }
        let version = c.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::parse("checkpoint", format!("unsupported version {version}")));
        }
        let dtype = c.string()?;
        let width = match dtype.as_str() {
            "f32" => 4,
            "f64" => 8,
            other => return Err(Error::parse("checkpoint", format!("unknown dtype {other}"))),
        };
        let model_config = c.string()?;
        let step = c.u64()?;
        let seed = c.u64()?;
        let count = c.u64()? as usize;
        let mut params = ParamStore::new(seed);
        for _ in 0..count.min(bytes.len()) {
            let name = c.string()?;
            let trainable = c.take(1)?[0] == 1;
            let value = c.tensor(width)?;
            if params.by_name.contains_key(&name) {
                return Err(Error::parse("checkpoint", format!("duplicate parameter {name}")));
            }
            params.by_name.insert(name.clone(), params.entries.len());
            params.entries.push(Entry { name, value, trainable });
        }
        if params.len() != count {
            return Err(Error::parse("checkpoint", "parameter count mismatch"));
        }
        let adam = match c.take(1)?[0] {
            0 => None,
            1 => {
                let mut f = || -> Result<f64> { Ok(f64::from_le_bytes(c.take(8)?.try_into().expect("8"))) };
                let config = AdamConfig {
                    beta1: f()?,
                    beta2: f()?,
                    eps: f()?,
                };
                let astep = c.u64()?;
                let mut m = Vec::with_capacity(count);
                let mut v = Vec::with_capacity(count);
                for _ in 0..count {
                    m.push(c.tensor(width)?);
                    v.push(c.tensor(width)?);
                }
                Some(Adam {
                    config,
                    step: astep,
                    m,
                    v,
                })
            }
            other => return Err(Error::parse("checkpoint", format!("bad optimizer flag {other}"))),
        };
        if c.pos != bytes.len() {
            return Err(Error::parse("checkpoint", "trailing bytes"));
        }
        Ok(Checkpoint {
            model_config,
            step,
            params,
            adam,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}
