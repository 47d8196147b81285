//! Parameter storage, forward sessions and the handful of layers the
//! models are built from.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::ops::BatchStats;
use crate::{Grads, Result, Scalar, Tape, Tensor, TensorError, Var};

static NEXT_STORE_UID: AtomicU64 = AtomicU64::new(1);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
    NormScale,
    NormShift,
    RunningMean,
    RunningVar,
}

impl ParamKind {
    /// Buffers are state that gradient descent never touches.
    pub fn is_buffer(self) -> bool {
        matches!(self, ParamKind::RunningMean | ParamKind::RunningVar)
    }

    pub fn decays(self) -> bool {
        self == ParamKind::Weight
    }
}

#[derive(Clone, Debug)]
pub struct ParamEntry<T> {
    pub name: String,
    pub kind: ParamKind,
    pub value: Tensor<T>,
}

/// Ordered, named collection of parameters and buffers.
///
/// The insertion order is the serialization order. Every store carries a
/// process-unique id so one [`Session`] can bind several stores.
#[derive(Debug)]
pub struct ParamStore<T> {
    uid: u64,
    entries: Vec<ParamEntry<T>>,
}

impl<T: Scalar> Clone for ParamStore<T> {
    fn clone(&self) -> Self {
        Self { uid: NEXT_STORE_UID.fetch_add(1, Ordering::Relaxed), entries: self.entries.clone() }
    }
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { uid: NEXT_STORE_UID.fetch_add(1, Ordering::Relaxed), entries: Vec::new() }
    }

    pub fn uid(&self) -> u64 {
        self.uid
    }

    pub fn add(&mut self, name: impl Into<String>, kind: ParamKind, value: Tensor<T>) -> ParamId {
        let name = name.into();
        assert!(self.find(&name).is_none(), "duplicate parameter name {name}");
        self.entries.push(ParamEntry { name, kind, value });
        ParamId(self.entries.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].value
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry<T> {
        &self.entries[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
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

    pub fn entries(&self) -> &[ParamEntry<T>] {
        &self.entries
    }

    /// Number of trainable scalars (buffers excluded).
    pub fn num_trainable(&self) -> usize {
        self.entries.iter().filter(|e| !e.kind.is_buffer()).map(|e| e.value.numel()).sum()
    }

    /// True when names, shapes and every value are bitwise identical.
    pub fn bitwise_eq(&self, other: &Self) -> bool {
        self.entries.len() == other.entries.len()
            && self.entries.iter().zip(&other.entries).all(|(a, b)| {
                a.name == b.name
                    && a.value.shape() == b.value.shape()
                    && a.value.data().iter().zip(b.value.data()).all(|(x, y)| x.bits() == y.bits())
            })
    }

    /// A new store holding the first `n` entries; their ids stay valid.
    pub fn prefix(&self, n: usize) -> Self {
        Self { uid: NEXT_STORE_UID.fetch_add(1, Ordering::Relaxed), entries: self.entries[..n].to_vec() }
    }

    /// Copy every value from a store with the same layout.
    pub fn copy_from(&mut self, other: &Self) -> Result<()> {
        self.check_layout(other)?;
        for (a, b) in self.entries.iter_mut().zip(&other.entries) {
            a.value.data_mut().copy_from_slice(b.value.data());
        }
        Ok(())
    }

    /// Error naming the first entry whose name or shape differs.
    pub fn check_layout(&self, other: &Self) -> Result<()> {
        if self.entries.len() != other.entries.len() {
            return Err(TensorError::Layout(format!(
                "parameter count {} vs {}",
                self.entries.len(),
                other.entries.len()
            )));
        }
        for (a, b) in self.entries.iter().zip(&other.entries) {
            if a.name != b.name || a.value.shape() != b.value.shape() {
                return Err(TensorError::Layout(format!(
                    "{} {:?} vs {} {:?}",
                    a.name,
                    a.value.shape(),
                    b.name,
                    b.value.shape()
                )));
            }
        }
        Ok(())
    }

    pub fn apply_bn_updates(&mut self, updates: &[BnUpdate<T>]) {
        let uid = self.uid;
        for u in updates.iter().filter(|u| u.store_uid == uid) {
            let m = u.momentum;
            let one = T::one();
            for (r, &b) in self.get_mut(u.running_mean).data_mut().iter_mut().zip(&u.stats.mean) {
                *r = (one - m) * *r + m * b;
            }
            for (r, &b) in self.get_mut(u.running_var).data_mut().iter_mut().zip(&u.stats.var) {
                *r = (one - m) * *r + m * b;
            }
        }
    }
}

/// Running-statistics update produced by a training-mode batch norm.
#[derive(Clone, Debug)]
pub struct BnUpdate<T> {
    pub store_uid: u64,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub momentum: T,
    pub stats: BatchStats<T>,
}

/// Gradients of one store's parameters.
#[derive(Clone, Debug)]
pub struct ParamGrads<T> {
    grads: HashMap<ParamId, Tensor<T>>,
}

impl<T: Scalar> ParamGrads<T> {
    pub fn get(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.grads.get(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&ParamId, &Tensor<T>)> {
        self.grads.iter()
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn all_finite(&self) -> bool {
        self.grads.values().all(|g| g.all_finite())
    }

    /// Merge by summation.
    pub fn accumulate(&mut self, other: ParamGrads<T>) -> Result<()> {
        for (id, g) in other.grads {
            match self.grads.get_mut(&id) {
                Some(acc) => acc.add_assign(&g)?,
                None => {
                    self.grads.insert(id, g);
                }
            }
        }
        Ok(())
    }
}

/// A single forward (and optional backward) pass.
///
/// Parameters are bound lazily as tape leaves; stores registered with
/// [`Session::freeze`] are bound as constants.
pub struct Session<T> {
    pub tape: Tape<T>,
    train: bool,
    bound: HashMap<(u64, ParamId), Var>,
    frozen: Vec<u64>,
    bn_updates: Vec<BnUpdate<T>>,
}

impl<T: Scalar> Session<T> {
    /// `train` selects batch statistics in batch norm layers.
    pub fn new(train: bool) -> Self {
        Self { tape: Tape::new(), train, bound: HashMap::new(), frozen: Vec::new(), bn_updates: Vec::new() }
    }

    pub fn is_train(&self) -> bool {
        self.train
    }

    pub fn freeze(&mut self, store: &ParamStore<T>) {
        self.frozen.push(store.uid);
    }

    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&(store.uid, id)) {
            return v;
        }
        let grad = !self.frozen.contains(&store.uid);
        let v = self.tape.leaf(store.get(id).clone(), grad);
        self.bound.insert((store.uid, id), v);
        v
    }

    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.tape.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        self.tape.value(v)
    }

    pub(crate) fn record_bn(&mut self, update: BnUpdate<T>) {
        self.bn_updates.push(update);
    }

    pub fn bn_updates(&self) -> &[BnUpdate<T>] {
        &self.bn_updates
    }

    pub fn backward(&self, loss: Var) -> Result<Grads<T>> {
        self.tape.backward(loss)
    }

    /// Gradients of every parameter of `store` bound in this session;
    /// bound parameters without a gradient path get explicit zeros.
    pub fn param_grads(&self, store: &ParamStore<T>, grads: &Grads<T>) -> ParamGrads<T> {
        let grads = self
            .bound
            .iter()
            .filter(|((uid, _), _)| *uid == store.uid)
            .map(|(&(_, id), &v)| {
                let g = grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(store.get(id).shape()));
                (id, g)
            })
            .collect();
        ParamGrads { grads }
    }
}

fn normal_tensor<T: Scalar>(shape: &[usize], std: f64, rng: &mut impl Rng) -> Tensor<T> {
    let dist = Normal::new(0.0, std).expect("finite std");
    Tensor::from_fn(shape, |_| T::of(dist.sample(rng)))
}

/// Square-kernel convolution, He-initialized.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = (c_in * kernel * kernel) as f64;
        let w = normal_tensor(&[c_out, c_in, kernel, kernel], (2.0 / fan_in).sqrt(), rng);
        let weight = store.add(format!("{name}.weight"), ParamKind::Weight, w);
        let bias = bias.then(|| store.add(format!("{name}.bias"), ParamKind::Bias, Tensor::zeros(&[c_out])));
        Self { weight, bias, stride, pad }
    }

    pub fn forward<T: Scalar>(&self, s: &mut Session<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = s.param(store, self.weight);
        let b = self.bias.map(|b| s.param(store, b));
        s.tape.conv2d(x, w, b, self.stride, self.pad)
    }
}

/// Batch normalization over the channel axis of `[C, ...]` activations.
#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), ParamKind::NormScale, Tensor::full(&[channels], T::one())),
            beta: store.add(format!("{name}.beta"), ParamKind::NormShift, Tensor::zeros(&[channels])),
            running_mean: store.add(format!("{name}.running_mean"), ParamKind::RunningMean, Tensor::zeros(&[channels])),
            running_var: store.add(
                format!("{name}.running_var"),
                ParamKind::RunningVar,
                Tensor::full(&[channels], T::one()),
            ),
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    pub fn forward<T: Scalar>(&self, s: &mut Session<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let gamma = s.param(store, self.gamma);
        let beta = s.param(store, self.beta);
        if s.is_train() {
            let (y, stats) = s.tape.batch_norm_train(x, gamma, beta, T::of(self.eps))?;
            s.record_bn(BnUpdate {
                store_uid: store.uid(),
                running_mean: self.running_mean,
                running_var: self.running_var,
                momentum: T::of(self.momentum),
                stats,
            });
            Ok(y)
        } else {
            let mean = store.get(self.running_mean).data().to_vec();
            let var = store.get(self.running_var).data().to_vec();
            s.tape.batch_norm_eval(x, gamma, beta, &mean, &var, T::of(self.eps))
        }
    }
}

/// Dense layer on `[D_in, N]` activations.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let bound = 1.0 / (d_in as f64).sqrt();
        let w = Tensor::from_fn(&[d_out, d_in], |_| T::of(rng.random_range(-bound..bound)));
        let weight = store.add(format!("{name}.weight"), ParamKind::Weight, w);
        let bias = bias.then(|| {
            let b = Tensor::from_fn(&[d_out], |_| T::of(rng.random_range(-bound..bound)));
            store.add(format!("{name}.bias"), ParamKind::Bias, b)
        });
        Self { weight, bias }
    }

    pub fn forward<T: Scalar>(&self, s: &mut Session<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = s.param(store, self.weight);
        let b = self.bias.map(|b| s.param(store, b));
        s.tape.linear(x, w, b)
    }
}
