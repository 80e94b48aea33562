//! Named parameter storage, forward-pass binding, and the checkpoint container.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{relative_error, sample_indices, GradCheck, Graph, Tensor, Var};

const MAGIC: &[u8; 8] = b"TALGNCKP";
pub const CHECKPOINT_VERSION: u32 = 1;

/// How a parameter is filled the first time it is requested.
#[derive(Clone, Copy, Debug)]
pub enum Init {
    /// `U(-1/√fan_in, 1/√fan_in)`.
    FanIn(usize),
    Zeros,
    Ones,
    Fill(f64),
}

/// Parameters keyed by dotted path, e.g. `gsce.s1.attn.q.w`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.tensors.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    pub fn names(&self) -> Vec<String> {
        self.tensors.keys().cloned().collect()
    }

    /// Writes the container: magic, version, metadata string, then tensors in
    /// name order as (name, rank, dims, little-endian f64 data).
    pub fn write_to(&self, mut w: impl Write, meta: &str) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        write_bytes(&mut w, meta.as_bytes())?;
        w.write_all(&(self.tensors.len() as u32).to_le_bytes())?;
        for (name, t) in &self.tensors {
            write_bytes(&mut w, name.as_bytes())?;
            w.write_all(&(t.ndim() as u32).to_le_bytes())?;
            for &d in t.shape() {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            for &v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    /// Reads a container, returning the store and its metadata string.
    pub fn read_from(mut r: impl Read) -> Result<(Self, String)> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)
            .map_err(|_| Error::Schema("truncated checkpoint header".into()))?;
        if &magic != MAGIC {
            return Err(Error::Schema("not a checkpoint file (bad magic)".into()));
        }
        let version = read_u32(&mut r)?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Schema(format!(
                "checkpoint schema version {version}, expected {CHECKPOINT_VERSION}"
            )));
        }
        let meta = String::from_utf8(read_bytes(&mut r)?)
            .map_err(|_| Error::Schema("checkpoint metadata is not UTF-8".into()))?;
        let count = read_u32(&mut r)?;
        let mut store = Self::new();
        for _ in 0..count {
            let name = String::from_utf8(read_bytes(&mut r)?)
                .map_err(|_| Error::Schema("tensor name is not UTF-8".into()))?;
            let rank = read_u32(&mut r)? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                let mut b = [0u8; 8];
                r.read_exact(&mut b).map_err(|_| truncated(&name))?;
                shape.push(u64::from_le_bytes(b) as usize);
            }
            let n: usize = shape.iter().product();
            let mut raw = vec![0u8; n * 8];
            r.read_exact(&mut raw).map_err(|_| truncated(&name))?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            let t = Tensor::new(&shape, data)
                .map_err(|e| Error::Schema(format!("tensor `{name}`: {e}")))?;
            store.insert(name, t);
        }
        Ok((store, meta))
    }

    pub fn save(&self, path: impl AsRef<Path>, meta: &str) -> Result<()> {
        let mut buf = Vec::new();
        self.write_to(&mut buf, meta)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<(Self, String)> {
        let bytes = std::fs::read(path.as_ref()).map_err(|e| Error::Data {
            path: path.as_ref().to_path_buf(),
            reason: e.to_string(),
        })?;
        Self::read_from(bytes.as_slice())
    }
}

fn truncated(name: &str) -> Error {
    Error::Schema(format!("checkpoint truncated inside tensor `{name}`"))
}

fn write_bytes(w: &mut impl Write, b: &[u8]) -> Result<()> {
    w.write_all(&(b.len() as u32).to_le_bytes())?;
    w.write_all(b)?;
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)
        .map_err(|_| Error::Schema("truncated checkpoint".into()))?;
    Ok(u32::from_le_bytes(b))
}

fn read_bytes(r: &mut impl Read) -> Result<Vec<u8>> {
    let n = read_u32(r)? as usize;
    let mut b = vec![0u8; n];
    r.read_exact(&mut b)
        .map_err(|_| Error::Schema("truncated checkpoint".into()))?;
    Ok(b)
}

enum Source<'a> {
    Frozen(&'a ParamStore),
    Init { store: ParamStore, rng: ChaCha8Rng },
}

/// A forward pass in progress: owns the graph and binds named parameters into
/// it on first use.
///
/// In init mode, missing parameters are created from their declared shape and
/// [`Init`]; otherwise a missing or mis-shaped parameter is a schema error.
pub struct Session<'a> {
    pub g: Graph,
    source: Source<'a>,
    bound: BTreeMap<String, Var>,
    trainable: bool,
}

impl<'a> Session<'a> {
    /// Binds parameters from `store`; `trainable` controls gradient tracking.
    pub fn new(store: &'a ParamStore, trainable: bool) -> Self {
        Self {
            g: Graph::new(),
            source: Source::Frozen(store),
            bound: BTreeMap::new(),
            trainable,
        }
    }

    /// Creates parameters on demand, seeded deterministically.
    pub fn init(seed: u64) -> Session<'static> {
        Session {
            g: Graph::new(),
            source: Source::Init {
                store: ParamStore::new(),
                rng: ChaCha8Rng::seed_from_u64(seed),
            },
            bound: BTreeMap::new(),
            trainable: false,
        }
    }

    pub fn param(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            if self.g.shape(v) != shape {
                return Err(Error::Schema(format!(
                    "parameter `{name}` requested with shapes {:?} and {shape:?}",
                    self.g.shape(v)
                )));
            }
            return Ok(v);
        }
        let t = match &mut self.source {
            Source::Frozen(store) => {
                let t = store
                    .get(name)
                    .ok_or_else(|| Error::Schema(format!("missing parameter `{name}`")))?;
                if t.shape() != shape {
                    return Err(Error::Schema(format!(
                        "parameter `{name}` has shape {:?}, model expects {shape:?}",
                        t.shape()
                    )));
                }
                t.clone()
            }
            Source::Init { store, rng } => {
                let t = match init {
                    Init::FanIn(fan_in) => {
                        let bound = 1.0 / (fan_in as f64).sqrt();
                        Tensor::from_fn(shape, |_| rng.gen_range(-bound..bound))
                    }
                    Init::Zeros => Tensor::zeros(shape),
                    Init::Ones => Tensor::full(shape, 1.0),
                    Init::Fill(v) => Tensor::full(shape, v),
                };
                store.insert(name, t.clone());
                t
            }
        };
        let v = if self.trainable {
            self.g.param(t)
        } else {
            self.g.constant(t)
        };
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn bound(&self) -> &BTreeMap<String, Var> {
        &self.bound
    }

    /// Store built by an init-mode session.
    pub fn into_store(self) -> Option<ParamStore> {
        match self.source {
            Source::Init { store, .. } => Some(store),
            Source::Frozen(_) => None,
        }
    }

    /// Gradients of bound parameters after `g.backward`; unreached ones are zero.
    pub fn grads(&self) -> BTreeMap<String, Tensor> {
        self.bound
            .iter()
            .map(|(name, &v)| {
                let grad = self
                    .g
                    .grad(v)
                    .unwrap_or_else(|| Tensor::zeros(self.g.shape(v)));
                (name.clone(), grad)
            })
            .collect()
    }
}

/// Central-difference check of a session function with respect to both its
/// inputs and every parameter of `store`.
///
/// Inputs enter as leaves in the order given. With `max_per_tensor =
/// Some(k)`, only `k` evenly spaced entries of each input and parameter are
/// perturbed.
pub fn gradcheck_session<F>(
    store: &ParamStore,
    inputs: &[Tensor],
    f: F,
    step: f64,
    tol: f64,
    max_per_tensor: Option<usize>,
) -> Result<GradCheck>
where
    F: Fn(&mut Session, &[Var]) -> Result<Var>,
{
    fn eval<'s, F>(f: &F, store: &'s ParamStore, inputs: &[Tensor], trainable: bool) -> Result<(Session<'s>, Vec<Var>, Var)>
    where
        F: Fn(&mut Session, &[Var]) -> Result<Var>,
    {
        let mut s = Session::new(store, trainable);
        let vars: Vec<Var> = inputs
            .iter()
            .map(|t| if trainable { s.g.param(t.clone()) } else { s.g.constant(t.clone()) })
            .collect();
        let out = f(&mut s, &vars)?;
        if s.g.value(out).numel() != 1 {
            return Err(Error::Contract("gradcheck function must be scalar-valued".into()));
        }
        Ok((s, vars, out))
    }
    let (mut s, vars, out) = eval(&f, store, inputs, true)?;
    s.g.backward(out)?;
    let input_grads: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| s.g.grad(v).unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();
    let param_grads = s.grads();
    drop(s);

    let value = |store: &ParamStore, inputs: &[Tensor]| -> Result<f64> {
        let (s, _, out) = eval(&f, store, inputs, false)?;
        Ok(s.g.value(out).item())
    };
    let mut max_err: f64 = 0.0;
    let mut checked = 0;
    let mut central = |up: f64, down: f64, analytic: f64| {
        max_err = max_err.max(relative_error(analytic, (up - down) / (2.0 * step)));
        checked += 1;
    };

    let mut work = inputs.to_vec();
    for k in 0..inputs.len() {
        for i in sample_indices(inputs[k].numel(), max_per_tensor) {
            let orig = inputs[k].data()[i];
            work[k].data_mut()[i] = orig + step;
            let up = value(store, &work)?;
            work[k].data_mut()[i] = orig - step;
            let down = value(store, &work)?;
            work[k].data_mut()[i] = orig;
            central(up, down, input_grads[k].data()[i]);
        }
    }
    let mut perturbed = store.clone();
    for (name, grad) in &param_grads {
        for i in sample_indices(grad.numel(), max_per_tensor) {
            let orig = store.get(name).expect("bound parameter").data()[i];
            let set = |p: &mut ParamStore, v: f64| {
                p.tensors.get_mut(name).expect("bound parameter").data_mut()[i] = v;
            };
            set(&mut perturbed, orig + step);
            let up = value(&perturbed, inputs)?;
            set(&mut perturbed, orig - step);
            let down = value(&perturbed, inputs)?;
            set(&mut perturbed, orig);
            central(up, down, grad.data()[i]);
        }
    }
    Ok(GradCheck {
        passed: max_err <= tol,
        max_rel_error: max_err,
        checked,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_store() -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("a.w", Tensor::new(&[2, 3], vec![1.0, -2.5, 3.25, 0.0, f64::MIN_POSITIVE, 1e300]).unwrap());
        s.insert("b", Tensor::scalar(0.1));
        s
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let s = sample_store();
        let mut buf = Vec::new();
        s.write_to(&mut buf, "{\"k\":1}").unwrap();
        let (back, meta) = ParamStore::read_from(buf.as_slice()).unwrap();
        assert_eq!(back, s);
        assert_eq!(meta, "{\"k\":1}");
    }

    #[test]
    fn corrupt_checkpoints_are_schema_errors() {
        let s = sample_store();
        let mut buf = Vec::new();
        s.write_to(&mut buf, "").unwrap();
        let mut bad_magic = buf.clone();
        bad_magic[0] = b'X';
        assert!(matches!(ParamStore::read_from(bad_magic.as_slice()), Err(Error::Schema(_))));
        let mut bad_version = buf.clone();
        bad_version[8] = 99;
        assert!(matches!(ParamStore::read_from(bad_version.as_slice()), Err(Error::Schema(_))));
        let short = &buf[..buf.len() - 3];
        let err = ParamStore::read_from(short).unwrap_err();
        assert!(err.to_string().contains("b"), "{err}");
    }

    #[test]
    fn session_reports_missing_and_misshaped_parameters() {
        let s = sample_store();
        let mut sess = Session::new(&s, true);
        assert!(sess.param("a.w", &[2, 3], Init::Zeros).is_ok());
        let err = sess.param("c", &[1], Init::Zeros).unwrap_err();
        assert!(err.to_string().contains("`c`"));
        let err = sess.param("b", &[2], Init::Zeros).unwrap_err();
        assert!(matches!(err, Error::Schema(m) if m.contains("`b`")));
    }

    #[test]
    fn init_is_seeded_and_respects_fan_in() {
        let build = |seed| {
            let mut sess = Session::init(seed);
            sess.param("w", &[4, 25], Init::FanIn(25)).unwrap();
            sess.param("g", &[4], Init::Ones).unwrap();
            sess.into_store().unwrap()
        };
        let (a, b, c) = (build(1), build(1), build(2));
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert!(a.get("w").unwrap().data().iter().all(|v| v.abs() < 0.2));
        assert_eq!(a.get("g").unwrap().data(), &[1.0; 4]);
    }
}
