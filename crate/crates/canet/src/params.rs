//! Named parameter storage and the forward-pass context.
//!
//! `ParamSet` owns every learnable tensor and non-trainable buffer of one
//! network, keyed by dotted names in registration order (the order defines
//! checkpoint layout). `Fwd` wires a `ParamSet` to a fresh tape for one
//! forward pass: parameters enter the tape as leaves exactly once, batch-norm
//! running buffers are updated in place when requested, and dropout draws
//! from the pass's seeded stream.

use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use std::collections::BTreeMap;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Kind {
    /// Learnable: becomes a requires_grad tape leaf, optimized, checkpointed.
    Param,
    /// Non-trainable state (batch-norm running stats): mutated outside the
    /// tape, checkpointed, never optimized.
    Buffer,
}

struct Entry<S: Scalar> {
    tensor: Tensor<S>,
    kind: Kind,
}

impl<S: Scalar> Clone for Entry<S> {
    fn clone(&self) -> Self {
        Entry { tensor: self.tensor.clone(), kind: self.kind }
    }
}

pub struct ParamSet<S: Scalar> {
    names: Vec<String>,
    index: BTreeMap<String, usize>,
    entries: Vec<Entry<S>>,
}

impl<S: Scalar> Clone for ParamSet<S> {
    fn clone(&self) -> Self {
        ParamSet { names: self.names.clone(), index: self.index.clone(), entries: self.entries.clone() }
    }
}

impl<S: Scalar> Default for ParamSet<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> ParamSet<S> {
    pub fn new() -> Self {
        ParamSet { names: Vec::new(), index: BTreeMap::new(), entries: Vec::new() }
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor<S>, kind: Kind) {
        assert!(
            !self.index.contains_key(name),
            "parameter {name} registered twice"
        );
        self.index.insert(name.to_string(), self.entries.len());
        self.names.push(name.to_string());
        self.entries.push(Entry { tensor, kind });
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn get(&self, name: &str) -> &Tensor<S> {
        let i = *self.index.get(name).unwrap_or_else(|| panic!("unknown parameter {name}"));
        &self.entries[i].tensor
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor<S> {
        let i = *self.index.get(name).unwrap_or_else(|| panic!("unknown parameter {name}"));
        &mut self.entries[i].tensor
    }

    pub fn kind(&self, name: &str) -> Kind {
        let i = *self.index.get(name).unwrap_or_else(|| panic!("unknown parameter {name}"));
        self.entries[i].kind
    }

    /// Entries in registration order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<S>, Kind)> {
        self.names
            .iter()
            .zip(&self.entries)
            .map(|(n, e)| (n.as_str(), &e.tensor, e.kind))
    }

    /// Names of learnable parameters in registration order.
    pub fn param_names(&self) -> Vec<String> {
        self.iter()
            .filter(|(_, _, k)| *k == Kind::Param)
            .map(|(n, _, _)| n.to_string())
            .collect()
    }

    /// Total learnable scalar count.
    pub fn param_count(&self) -> usize {
        self.iter()
            .filter(|(_, _, k)| *k == Kind::Param)
            .map(|(_, t, _)| t.numel())
            .sum()
    }

    /// Disjoint mutable access to two entries (used for the running-stat pair).
    fn pair_mut(&mut self, a: &str, b: &str) -> (&mut Tensor<S>, &mut Tensor<S>) {
        let ia = *self.index.get(a).unwrap_or_else(|| panic!("unknown parameter {a}"));
        let ib = *self.index.get(b).unwrap_or_else(|| panic!("unknown parameter {b}"));
        assert_ne!(ia, ib);
        if ia < ib {
            let (l, r) = self.entries.split_at_mut(ib);
            (&mut l[ia].tensor, &mut r[0].tensor)
        } else {
            let (l, r) = self.entries.split_at_mut(ia);
            (&mut r[0].tensor, &mut l[ib].tensor)
        }
    }

    // ── layer registration helpers ──────────────────────────────────────

    /// Convolution with He-normal weights [O,I,K,K] and zero bias.
    pub fn add_conv(&mut self, rng: &mut ChaCha8Rng, name: &str, o: usize, i: usize, k: usize) {
        let fan_in = (i * k * k) as f64;
        let dist = Normal::new(0.0, (2.0 / fan_in).sqrt()).unwrap();
        let data: Vec<S> = (0..o * i * k * k).map(|_| S::fr(dist.sample(rng))).collect();
        self.insert(&format!("{name}.w"), Tensor::new(vec![o, i, k, k], data), Kind::Param);
        self.insert(&format!("{name}.b"), Tensor::zeros(vec![o]), Kind::Param);
    }

    /// Transposed convolution with He-normal weights [I,O,K,K] and zero bias.
    pub fn add_tconv(&mut self, rng: &mut ChaCha8Rng, name: &str, i: usize, o: usize, k: usize) {
        let fan_in = (i * k * k) as f64;
        let dist = Normal::new(0.0, (2.0 / fan_in).sqrt()).unwrap();
        let data: Vec<S> = (0..i * o * k * k).map(|_| S::fr(dist.sample(rng))).collect();
        self.insert(&format!("{name}.w"), Tensor::new(vec![i, o, k, k], data), Kind::Param);
        self.insert(&format!("{name}.b"), Tensor::zeros(vec![o]), Kind::Param);
    }

    /// Zero-initialized convolution (prediction heads start at logit 0).
    pub fn add_zero_conv(&mut self, name: &str, o: usize, i: usize, k: usize) {
        self.insert(&format!("{name}.w"), Tensor::zeros(vec![o, i, k, k]), Kind::Param);
        self.insert(&format!("{name}.b"), Tensor::zeros(vec![o]), Kind::Param);
    }

    /// Batch-norm affine params plus running mean/var buffers.
    pub fn add_bn(&mut self, name: &str, c: usize) {
        self.insert(&format!("{name}.g"), Tensor::full(vec![c], 1.0), Kind::Param);
        self.insert(&format!("{name}.b"), Tensor::zeros(vec![c]), Kind::Param);
        self.insert(&format!("{name}.rm"), Tensor::zeros(vec![c]), Kind::Buffer);
        self.insert(&format!("{name}.rv"), Tensor::full(vec![c], 1.0), Kind::Buffer);
    }
}

// ── forward context ─────────────────────────────────────────────────────

/// One network forward pass: a tape plus the parameter set feeding it.
pub struct Fwd<'a, S: Scalar> {
    pub tape: Tape<S>,
    params: &'a mut ParamSet<S>,
    vars: BTreeMap<String, Var>,
    pub training: bool,
    update_running: bool,
    rng: Option<&'a mut ChaCha8Rng>,
    grad: bool,
}

impl<'a, S: Scalar> Fwd<'a, S> {
    /// `training` selects batch statistics and live dropout; `update_running`
    /// additionally folds batch statistics into the running buffers; `grad`
    /// decides whether parameters enter the tape as differentiable leaves.
    /// `rng` is only needed when the pass will draw dropout masks.
    pub fn new(
        params: &'a mut ParamSet<S>,
        training: bool,
        update_running: bool,
        rng: Option<&'a mut ChaCha8Rng>,
        grad: bool,
    ) -> Self {
        Fwd {
            tape: Tape::new(),
            params,
            vars: BTreeMap::new(),
            training,
            update_running,
            rng,
            grad,
        }
    }

    /// A network input: constant leaf, never differentiated.
    pub fn input(&mut self, t: Tensor<S>) -> Var {
        self.tape.leaf(t, false)
    }

    pub fn constant(&mut self, t: Tensor<S>) -> Var {
        self.tape.constant(t)
    }

    /// Fetch a learnable parameter onto the tape (memoized per pass).
    pub fn leaf(&mut self, name: &str) -> Var {
        if let Some(&v) = self.vars.get(name) {
            return v;
        }
        assert!(self.params.contains(name), "forward pass references unknown parameter {name}");
        assert_eq!(self.params.kind(name), Kind::Param, "buffer {name} cannot be a tape leaf");
        let t = self.params.get(name).clone();
        let v = self.tape.leaf(t, self.grad);
        self.vars.insert(name.to_string(), v);
        v
    }

    pub fn conv(&mut self, name: &str, x: Var, stride: usize, pad: usize) -> Var {
        let w = self.leaf(&format!("{name}.w"));
        let b = self.leaf(&format!("{name}.b"));
        self.tape.conv2d(x, w, Some(b), stride, pad)
    }

    pub fn tconv(&mut self, name: &str, x: Var, stride: usize) -> Var {
        let w = self.leaf(&format!("{name}.w"));
        let b = self.leaf(&format!("{name}.b"));
        self.tape.conv_transpose2d(x, w, Some(b), stride)
    }

    pub fn bn(&mut self, name: &str, x: Var) -> Var {
        let gamma = self.leaf(&format!("{name}.g"));
        let beta = self.leaf(&format!("{name}.b"));
        let training = self.training;
        let update = self.training && self.update_running;
        let (rm, rv) = self.params.pair_mut(&format!("{name}.rm"), &format!("{name}.rv"));
        self.tape.batch_norm(x, gamma, beta, rm.data_mut(), rv.data_mut(), training, update)
    }

    /// conv -> batch_norm -> leaky_relu(0.2), the standard block.
    pub fn cbl(&mut self, name: &str, x: Var, stride: usize, pad: usize) -> Var {
        let c = self.conv(&format!("{name}.c"), x, stride, pad);
        let n = self.bn(&format!("{name}.n"), c);
        self.tape.leaky_relu(n, 0.2)
    }

    pub fn dropout(&mut self, x: Var, p: f64) -> Var {
        if !self.training || p == 0.0 {
            return x;
        }
        let rng = self
            .rng
            .as_mut()
            .expect("training forward with dropout requires an rng stream");
        self.tape.dropout(x, p, true, rng)
    }

    /// Gradients accumulated on this pass's parameter leaves, by name.
    pub fn collect_grads(&self) -> BTreeMap<String, Vec<S>> {
        let mut out = BTreeMap::new();
        for (name, &var) in &self.vars {
            if let Some(g) = self.tape.grad(var) {
                out.insert(name.clone(), g.to_vec());
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    #[test]
    fn registration_order_is_preserved() {
        let mut rng = stream(1, "init-test", 0);
        let mut p = ParamSet::<f32>::new();
        p.add_conv(&mut rng, "z.layer", 4, 3, 3);
        p.add_bn("a.norm", 4);
        p.add_zero_conv("m.head", 1, 4, 1);
        let names: Vec<&str> = p.iter().map(|(n, _, _)| n).collect();
        assert_eq!(
            names,
            vec!["z.layer.w", "z.layer.b", "a.norm.g", "a.norm.b", "a.norm.rm", "a.norm.rv", "m.head.w", "m.head.b"]
        );
        assert_eq!(p.kind("a.norm.rm"), Kind::Buffer);
        assert_eq!(p.param_count(), 4 * 3 * 9 + 4 + 4 + 4 + 4 + 1);
    }

    #[test]
    fn duplicate_registration_panics() {
        let r = std::panic::catch_unwind(|| {
            let mut p = ParamSet::<f32>::new();
            p.add_bn("n", 2);
            p.add_bn("n", 2);
        });
        assert!(r.is_err());
    }

    #[test]
    fn unknown_parameter_panics_with_name() {
        let r = std::panic::catch_unwind(|| {
            let mut p = ParamSet::<f32>::new();
            p.add_bn("real", 2);
            let mut f = Fwd::new(&mut p, false, false, None, false);
            f.leaf("ghost.w");
        });
        assert!(r.is_err());
    }

    #[test]
    fn he_init_statistics_are_sane() {
        let mut rng = stream(2, "init-test", 0);
        let mut p = ParamSet::<f64>::new();
        p.add_conv(&mut rng, "c", 64, 32, 3);
        let w = p.get("c.w");
        let mean: f64 = w.data().iter().sum::<f64>() / w.numel() as f64;
        let var: f64 = w.data().iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / w.numel() as f64;
        let want = 2.0 / (32.0 * 9.0);
        assert!(mean.abs() < 0.002, "mean {mean}");
        assert!((var - want).abs() < 0.1 * want, "var {var} want {want}");
        assert!(p.get("c.b").data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn forward_leaves_are_memoized_and_grads_collected() {
        let mut rng = stream(3, "init-test", 0);
        let mut p = ParamSet::<f64>::new();
        p.add_conv(&mut rng, "c", 2, 1, 3);
        let mut f = Fwd::new(&mut p, true, false, None, true);
        let x = f.input(Tensor::full(vec![1, 1, 4, 4], 0.5));
        let y1 = f.conv("c", x, 1, 1);
        let y2 = f.conv("c", x, 1, 1);
        let s = f.tape.add(y1, y2);
        let loss = f.tape.mean_all(s);
        f.tape.backward(loss);
        let grads = f.collect_grads();
        assert_eq!(grads.len(), 2);
        assert!(grads.contains_key("c.w") && grads.contains_key("c.b"));
        // both applications share one leaf, so the bias grad sums to 2 * 1/numel * numel... per channel
        let db = &grads["c.b"];
        assert_eq!(db.len(), 2);
        assert!((db[0] - 1.0).abs() < 1e-12, "bias grad {}", db[0]);
    }

    #[test]
    fn gradless_pass_records_no_gradients() {
        let mut rng = stream(4, "init-test", 0);
        let mut p = ParamSet::<f64>::new();
        p.add_conv(&mut rng, "c", 1, 1, 1);
        let mut f = Fwd::new(&mut p, false, false, None, false);
        let x = f.input(Tensor::full(vec![1, 1, 2, 2], 1.0));
        let y = f.conv("c", x, 1, 0);
        assert!(!f.tape.value(y).shape().is_empty());
        let grads = f.collect_grads();
        assert!(grads.is_empty() || grads.values().all(|g| g.is_empty()));
    }

    #[test]
    fn bn_running_stats_update_only_when_asked() {
        let mut p = ParamSet::<f64>::new();
        p.add_bn("n", 2);
        let x = Tensor::new(vec![1, 2, 2, 2], vec![1.0, 2.0, 3.0, 4.0, -1.0, -2.0, -3.0, -4.0]);

        let mut f = Fwd::new(&mut p, true, false, None, false);
        let xi = f.input(x.clone());
        f.bn("n", xi);
        drop(f);
        assert!(p.get("n.rm").data().iter().all(|&v| v == 0.0));

        let mut f = Fwd::new(&mut p, true, true, None, false);
        let xi = f.input(x);
        f.bn("n", xi);
        drop(f);
        // mean of channel 0 is 2.5; EMA with momentum 0.1 from 0 gives 0.25
        assert!((p.get("n.rm").data()[0] - 0.25).abs() < 1e-12);
        assert!((p.get("n.rm").data()[1] + 0.25).abs() < 1e-12);
    }
}
