//! Named parameter storage, per-step graph binding and the optimiser.
//!
//! Model weights live in a `ParamStore` keyed by dotted names. Each training
//! step opens a fresh tape; a `Binder` lazily registers every parameter the
//! step actually touches as a gradient-requiring leaf, so ablated branches
//! never enter the graph and receive neither gradients nor decay.

use std::collections::BTreeMap;

use ndarray::{ArrayD, IxDyn};
use rand::Rng;

use crate::error::{CodafError, Result};
use crate::tape::{Tape, Var};
use crate::tensor::{all_finite, randn, Scalar};

/// Flat collection of named weight arrays.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<F: Scalar> {
    params: BTreeMap<String, ArrayD<F>>,
}

impl<F: Scalar> ParamStore<F> {
    pub fn new() -> Self {
        ParamStore { params: BTreeMap::new() }
    }

    /// Register a fresh parameter; duplicate names are wiring bugs.
    pub fn insert(&mut self, name: &str, value: ArrayD<F>) -> Result<()> {
        if !all_finite(&value) {
            return Err(CodafError::numeric(format!("parameter {name} initialised non-finite")));
        }
        if self.params.insert(name.to_string(), value).is_some() {
            return Err(CodafError::config(format!("parameter {name} registered twice")));
        }
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&ArrayD<F>> {
        self.params
            .get(name)
            .ok_or_else(|| CodafError::config(format!("unknown parameter {name}")))
    }

    /// Replace an existing parameter's value, keeping its shape.
    pub fn set(&mut self, name: &str, value: ArrayD<F>) -> Result<()> {
        let slot = self
            .params
            .get_mut(name)
            .ok_or_else(|| CodafError::config(format!("unknown parameter {name}")))?;
        if slot.shape() != value.shape() {
            return Err(CodafError::shape(format!(
                "parameter {name} has shape {:?}, refusing {:?}",
                slot.shape(),
                value.shape()
            )));
        }
        *slot = value;
        Ok(())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    /// Deterministic name-sorted iteration.
    pub fn iter(&self) -> impl Iterator<Item = (&String, &ArrayD<F>)> {
        self.params.iter()
    }

    pub fn names(&self) -> Vec<String> {
        self.params.keys().cloned().collect()
    }

    pub fn param_count(&self) -> usize {
        self.params.values().map(|a| a.len()).sum()
    }

    pub fn tensor_count(&self) -> usize {
        self.params.len()
    }
}

/// Lazily binds store parameters onto the current tape, once each.
#[derive(Default)]
pub struct Binder {
    bound: BTreeMap<String, Var>,
}

impl Binder {
    pub fn new() -> Self {
        Binder { bound: BTreeMap::new() }
    }

    /// Leaf for `name`, registering it on first use.
    pub fn bind<F: Scalar>(
        &mut self,
        tape: &mut Tape<F>,
        store: &ParamStore<F>,
        name: &str,
    ) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let value = store.get(name)?.clone();
        let v = tape.leaf(value, true);
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    /// Every parameter this step touched, name-sorted.
    pub fn bound(&self) -> impl Iterator<Item = (&String, Var)> {
        self.bound.iter().map(|(n, &v)| (n, v))
    }

    pub fn len(&self) -> usize {
        self.bound.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bound.is_empty()
    }
}

/// Mutable view tying one tape, one binder and the weight store together
/// for the duration of a forward pass.
pub struct Graph<'a, F: Scalar> {
    pub tape: &'a mut Tape<F>,
    pub binder: &'a mut Binder,
    pub store: &'a ParamStore<F>,
}

impl<'a, F: Scalar> Graph<'a, F> {
    pub fn new(tape: &'a mut Tape<F>, binder: &'a mut Binder, store: &'a ParamStore<F>) -> Self {
        Graph { tape, binder, store }
    }

    /// Bound leaf for a parameter name.
    pub fn p(&mut self, name: &str) -> Result<Var> {
        self.binder.bind(self.tape, self.store, name)
    }
}

/// AdamW with decoupled weight decay. Moments are kept per parameter and
/// created on first update, so late-appearing parameters are handled.
pub struct AdamW<F: Scalar> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    steps: BTreeMap<String, u32>,
    m: BTreeMap<String, ArrayD<F>>,
    v: BTreeMap<String, ArrayD<F>>,
}

impl<F: Scalar> AdamW<F> {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        AdamW {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            steps: BTreeMap::new(),
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// Apply one update from named gradients. Parameters absent from
    /// `grads` are left untouched; non-finite gradients name the offender.
    pub fn step(&mut self, store: &mut ParamStore<F>, grads: &BTreeMap<String, ArrayD<F>>) -> Result<()> {
        for (name, g) in grads {
            if !all_finite(g) {
                return Err(CodafError::numeric(format!("gradient for {name} is not finite")));
            }
            let p = store.get(name)?.clone();
            if p.shape() != g.shape() {
                return Err(CodafError::shape(format!(
                    "gradient for {name} has shape {:?}, parameter {:?}",
                    g.shape(),
                    p.shape()
                )));
            }
            let t = self.steps.entry(name.clone()).or_insert(0);
            *t += 1;
            let tf = *t as i32;
            let b1 = F::from_f64(self.beta1);
            let b2 = F::from_f64(self.beta2);
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| ArrayD::zeros(IxDyn(g.shape())));
            m.zip_mut_with(g, |mm, &gg| *mm = b1 * *mm + (F::one() - b1) * gg);
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| ArrayD::zeros(IxDyn(g.shape())));
            v.zip_mut_with(g, |vv, &gg| *vv = b2 * *vv + (F::one() - b2) * gg * gg);
            let bc1 = F::one() - b1.powi(tf);
            let bc2 = F::one() - b2.powi(tf);
            let lr = F::from_f64(self.lr);
            let wd = F::from_f64(self.weight_decay);
            let eps = F::from_f64(self.eps);
            let mut new_p = p;
            ndarray::Zip::from(&mut new_p).and(&*m).and(&*v).for_each(|pp, &mm, &vv| {
                let mhat = mm / bc1;
                let vhat = vv / bc2;
                *pp = *pp - lr * (mhat / (vhat.sqrt() + eps)) - lr * wd * *pp;
            });
            if !all_finite(&new_p) {
                return Err(CodafError::numeric(format!("parameter {name} became non-finite")));
            }
            store.set(name, new_p)?;
        }
        Ok(())
    }
}

// ---- initialisers --------------------------------------------------------------

/// Kaiming-normal convolution weights [Cout, Cin, k, k].
pub fn he_conv<F: Scalar, R: Rng>(rng: &mut R, cout: usize, cin: usize, k: usize) -> ArrayD<F> {
    let std = (2.0 / (cin * k * k) as f64).sqrt();
    let mut w: ArrayD<F> = randn(rng, &[cout, cin, k, k]);
    w.mapv_inplace(|v| v * F::from_f64(std));
    w
}

/// Kaiming-normal linear weights [Cout, Cin].
pub fn he_linear<F: Scalar, R: Rng>(rng: &mut R, cout: usize, cin: usize) -> ArrayD<F> {
    let std = (2.0 / cin as f64).sqrt();
    let mut w: ArrayD<F> = randn(rng, &[cout, cin]);
    w.mapv_inplace(|v| v * F::from_f64(std));
    w
}

/// All-zero array, used for biases and for heads that must start inert.
pub fn zeros<F: Scalar>(shape: &[usize]) -> ArrayD<F> {
    ArrayD::zeros(IxDyn(shape))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn store_rejects_duplicates_and_shape_changes() {
        let mut s: ParamStore<f64> = ParamStore::new();
        s.insert("a.w", zeros(&[2, 2])).unwrap();
        assert!(s.insert("a.w", zeros(&[2, 2])).is_err(), "double registration is a bug");
        assert!(s.set("a.w", zeros(&[3])).is_err(), "shape changes are refused");
        assert!(s.set("missing", zeros(&[1])).is_err(), "unknown names are refused");
        assert_eq!(s.param_count(), 4, "element count sums across tensors");
    }

    #[test]
    fn binder_returns_the_same_leaf_for_repeated_use() {
        let mut s: ParamStore<f64> = ParamStore::new();
        s.insert("w", ArrayD::from_elem(IxDyn(&[2]), 1.5)).unwrap();
        let mut tape: Tape<f64> = Tape::new();
        let mut b = Binder::new();
        let v1 = b.bind(&mut tape, &s, "w").unwrap();
        let v2 = b.bind(&mut tape, &s, "w").unwrap();
        assert_eq!(v1.0, v2.0, "a parameter binds to one leaf per step");
        assert_eq!(b.len(), 1);
        assert_eq!(tape.len(), 1, "no duplicate leaves on the tape");
    }

    #[test]
    fn adamw_matches_a_hand_stepped_scalar() {
        // One scalar parameter, constant gradient, three steps, including
        // decoupled decay; reference values computed with the update rule
        // written out longhand.
        let mut s: ParamStore<f64> = ParamStore::new();
        s.insert("p", ArrayD::from_elem(IxDyn(&[1]), 1.0)).unwrap();
        let mut opt: AdamW<f64> = AdamW::new(0.1, 0.01);
        let g = ArrayD::from_elem(IxDyn(&[1]), 0.5);
        let mut grads = BTreeMap::new();
        grads.insert("p".to_string(), g);

        let (mut p, mut m, mut v) = (1.0f64, 0.0f64, 0.0f64);
        for t in 1..=3 {
            opt.step(&mut s, &grads).unwrap();
            m = 0.9 * m + 0.1 * 0.5;
            v = 0.999 * v + 0.001 * 0.25;
            let mhat = m / (1.0 - 0.9f64.powi(t));
            let vhat = v / (1.0 - 0.999f64.powi(t));
            p = p - 0.1 * (mhat / (vhat.sqrt() + 1e-8)) - 0.1 * 0.01 * p;
            let got = s.get("p").unwrap()[IxDyn(&[0])];
            assert!(
                (got - p).abs() < 1e-12,
                "step {t}: optimiser got {got}, longhand says {p}"
            );
        }
    }

    #[test]
    fn adamw_flags_non_finite_gradients_by_name() {
        let mut s: ParamStore<f64> = ParamStore::new();
        s.insert("block.w", ArrayD::from_elem(IxDyn(&[1]), 1.0)).unwrap();
        let mut opt: AdamW<f64> = AdamW::new(0.1, 0.0);
        let mut grads = BTreeMap::new();
        grads.insert("block.w".to_string(), ArrayD::from_elem(IxDyn(&[1]), f64::NAN));
        let err = opt.step(&mut s, &grads).unwrap_err();
        assert!(
            err.to_string().contains("block.w"),
            "the error must name the offending parameter: {err}"
        );
    }

    #[test]
    fn he_init_matches_expected_spread() {
        let mut rng = ChaCha8Rng::seed_from_u64(40);
        let w: ArrayD<f64> = he_conv(&mut rng, 32, 16, 3);
        let n = w.len() as f64;
        let mean = w.iter().sum::<f64>() / n;
        let var = w.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let want = 2.0 / (16.0 * 9.0);
        assert!(mean.abs() < 0.01, "centred init, got mean {mean}");
        assert!(
            (var - want).abs() / want < 0.15,
            "variance should track 2/fan_in: got {var}, want {want}"
        );
    }
}
