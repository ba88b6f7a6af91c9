use serde::{Deserialize, Serialize};

use super::tape::{Bound, Gradients, Tape};
use super::Tensor;
use crate::error::{MireError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Option<Tensor>,
}

/// Named trainable tensors, in registration order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn register(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.params.push(Parameter {
            name: name.into(),
            value,
            grad: None,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    /// Places every parameter on `tape` as a leaf.
    pub fn bind(&self, tape: &Tape, requires_grad: bool) -> Bound {
        Bound {
            vars: self
                .params
                .iter()
                .enumerate()
                .map(|(i, p)| tape.param_leaf(p.value.clone(), ParamId(i), requires_grad))
                .collect(),
        }
    }

    /// Adds the gradients of bound parameters into their `grad` buffers.
    pub fn accumulate(&mut self, bound: &Bound, grads: &Gradients) {
        for (p, &v) in self.params.iter_mut().zip(&bound.vars) {
            if let Some(g) = grads.get(v) {
                match &mut p.grad {
                    Some(acc) => acc.add_assign(g),
                    slot => *slot = Some(g.clone()),
                }
            }
        }
    }

    /// Sets every missing gradient to zero. Parameters that took no part in
    /// the loss then still receive weight decay.
    pub fn fill_missing_grads(&mut self) {
        for p in &mut self.params {
            if p.grad.is_none() {
                p.grad = Some(Tensor::zeros(p.value.shape()));
            }
        }
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }
}

/// SGD with momentum and L2 weight decay.
#[derive(Clone, Debug)]
pub struct SgdState {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Tensor>,
}

impl SgdState {
    pub fn new(learning_rate: f64, momentum: f64, weight_decay: f64) -> Result<Self> {
        if !(learning_rate > 0.0) || !(0.0..1.0).contains(&momentum) || !(weight_decay >= 0.0) {
            return Err(MireError::config(format!(
                "sgd: need lr > 0, momentum in [0,1), weight_decay >= 0; got {learning_rate}, {momentum}, {weight_decay}"
            )));
        }
        Ok(SgdState {
            learning_rate,
            momentum,
            weight_decay,
            velocity: Vec::new(),
        })
    }

    /// `v <- m v + (g + wd p)`, `p <- p - lr v`, then clears gradients.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        if let Some(p) = store.params.iter().find(|p| p.grad.is_none()) {
            return Err(MireError::contract(format!("sgd_step: parameter `{}` has no gradient", p.name)));
        }
        if self.velocity.len() != store.params.len() {
            self.velocity = store.params.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        }
        for (p, v) in store.params.iter_mut().zip(&mut self.velocity) {
            let g = p.grad.take().expect("checked above");
            if v.shape() != p.value.shape() {
                return Err(MireError::shape("sgd_step", format!("velocity {:?} vs param {:?}", v.shape(), p.value.shape())));
            }
            for ((pv, vv), gv) in p.value.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
                *vv = self.momentum * *vv + (gv + self.weight_decay * *pv);
                *pv -= self.learning_rate * *vv;
            }
            p.value.check_finite("sgd_step")?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(value: f64) -> (ParamStore, ParamId) {
        let mut s = ParamStore::new();
        let id = s.register("p", Tensor::from_vec(vec![value]));
        (s, id)
    }

    #[test]
    fn plain_gradient_step() {
        let (mut s, id) = single(1.0);
        let mut sgd = SgdState::new(1.0, 0.0, 0.0).unwrap();
        s.get_mut(id).grad = Some(Tensor::from_vec(vec![0.5]));
        sgd.step(&mut s).unwrap();
        assert_eq!(s.value(id).data(), &[0.5]);
        assert!(s.get(id).grad.is_none());
    }

    #[test]
    fn momentum_recurrence_two_steps() {
        let (mut s, id) = single(0.0);
        let mut sgd = SgdState::new(1.0, 0.9, 0.0).unwrap();
        for _ in 0..2 {
            s.get_mut(id).grad = Some(Tensor::from_vec(vec![1.0]));
            sgd.step(&mut s).unwrap();
        }
        // v1 = 1, v2 = 0.9 + 1 = 1.9
        assert!((s.value(id).data()[0] - (0.0 - 1.0 - 1.9)).abs() < 1e-15);
    }

    #[test]
    fn weight_decay_term() {
        let (mut s, id) = single(2.0);
        let mut sgd = SgdState::new(0.1, 0.0, 5e-4).unwrap();
        s.get_mut(id).grad = Some(Tensor::from_vec(vec![0.0]));
        sgd.step(&mut s).unwrap();
        assert!((s.value(id).data()[0] - (2.0 - 0.1 * (5e-4 * 2.0))).abs() < 1e-15);
    }

    #[test]
    fn missing_grad_is_contract_error() {
        let (mut s, _) = single(1.0);
        let mut sgd = SgdState::new(0.1, 0.9, 5e-4).unwrap();
        assert!(matches!(sgd.step(&mut s), Err(MireError::Contract(_))));
    }

    #[test]
    fn rejects_bad_hyperparameters() {
        assert!(SgdState::new(0.0, 0.9, 0.0).is_err());
        assert!(SgdState::new(0.1, 1.0, 0.0).is_err());
        assert!(SgdState::new(0.1, 0.5, -1.0).is_err());
    }
}
