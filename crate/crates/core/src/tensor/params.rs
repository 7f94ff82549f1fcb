use std::collections::HashMap;

use super::{Element, Gradients, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named trainable tensors. Insertion order is the canonical order used by
/// checkpoints and by the optimizer.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<E: Element = f32> {
    names: Vec<String>,
    tensors: Vec<Tensor<E>>,
    index: HashMap<String, ParamId>,
}

impl<E: Element> ParamStore<E> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, t: Tensor<E>) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::InvalidArgument(format!("duplicate parameter `{name}`")));
        }
        let id = ParamId(self.tensors.len());
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(t);
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<E> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<E> {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<E>> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<E>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Adds the parameter gradients from a reverse pass into each tensor's
    /// gradient buffer.
    pub fn accumulate(&mut self, grads: &Gradients<E>) -> Result<()> {
        for (id, g) in grads.params() {
            self.tensors[id.0].accumulate_grad(g)?;
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }

    pub fn cast<F: Element>(&self) -> ParamStore<F> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
            index: self.index.clone(),
        }
    }
}

/// Plain SGD: `p -= lr * grad(p)` for every parameter. Gradients are left
/// in place; the caller zeroes them.
pub fn sgd_step<E: Element>(params: &mut ParamStore<E>, lr: E) -> Result<()> {
    if let Some(i) = params.tensors.iter().position(|t| t.grad().is_none()) {
        return Err(Error::MissingGrad(params.names[i].clone()));
    }
    for t in &mut params.tensors {
        let g = t.grad.take().expect("checked above");
        t.data_mut().iter_mut().zip(&g).for_each(|(p, &d)| *p = *p - lr * d);
        t.grad = Some(g);
    }
    Ok(())
}

/// SGD with heavy-ball momentum: `v = mu * v + grad; p -= lr * v`.
/// With `mu = 0` this is exactly [`sgd_step`].
#[derive(Clone, Debug, Default)]
pub struct Sgd<E: Element = f32> {
    pub lr: E,
    pub momentum: E,
    velocity: Vec<Vec<E>>,
}

impl<E: Element> Sgd<E> {
    pub fn new(lr: E, momentum: E) -> Self {
        Self {
            lr,
            momentum,
            velocity: Vec::new(),
        }
    }

    pub fn step(&mut self, params: &mut ParamStore<E>) -> Result<()> {
        if self.momentum == E::zero() {
            return sgd_step(params, self.lr);
        }
        if let Some(i) = params.tensors.iter().position(|t| t.grad().is_none()) {
            return Err(Error::MissingGrad(params.names[i].clone()));
        }
        if self.velocity.len() != params.len() {
            self.velocity = params.tensors.iter().map(|t| vec![E::zero(); t.len()]).collect();
        }
        for (t, v) in params.tensors.iter_mut().zip(&mut self.velocity) {
            let g = t.grad.take().expect("checked above");
            for ((p, vi), &d) in t.data.iter_mut().zip(v.iter_mut()).zip(&g) {
                *vi = self.momentum * *vi + d;
                *p = *p - self.lr * *vi;
            }
            t.grad = Some(g);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Graph;

    #[test]
    fn zero_lr_leaves_params_unchanged() {
        let mut p = ParamStore::<f32>::new();
        let id = p.add("w", Tensor::new(vec![2], vec![1.0, -3.0]).unwrap()).unwrap();
        p.get_mut(id).accumulate_grad(&[5.0, 5.0]).unwrap();
        sgd_step(&mut p, 0.0).unwrap();
        assert_eq!(p.get(id).data(), &[1.0, -3.0]);
    }

    #[test]
    fn single_step_analytic() {
        let mut p = ParamStore::<f64>::new();
        let id = p.add("w", Tensor::scalar(1.0)).unwrap();
        p.get_mut(id).accumulate_grad(&[2.0]).unwrap();
        sgd_step(&mut p, 0.001).unwrap();
        assert!((p.get(id).item().unwrap() - 0.998).abs() < 1e-15);
        assert_eq!(p.get(id).grad().unwrap(), &[2.0]);
    }

    #[test]
    fn missing_grad_is_an_error() {
        let mut p = ParamStore::<f32>::new();
        p.add("w", Tensor::scalar(1.0)).unwrap();
        assert!(matches!(sgd_step(&mut p, 0.1), Err(Error::MissingGrad(n)) if n == "w"));
    }

    #[test]
    fn quadratic_converges_to_minimizer() {
        // f(w) = 2 (w - 3)^2, built from graph ops
        let mut p = ParamStore::<f64>::new();
        let id = p.add("w", Tensor::new(vec![1], vec![-4.0]).unwrap()).unwrap();
        for _ in 0..200 {
            p.zero_grad();
            let grads = {
                let mut g = Graph::with_params(&p);
                let w = g.param(id).unwrap();
                let c = g.input(Tensor::scalar(-3.0));
                let d = g.add(w, c).unwrap();
                let sq = g.mul(d, d).unwrap();
                let s = g.sum(sq).unwrap();
                let l = g.scale(s, 2.0).unwrap();
                g.backward(l).unwrap()
            };
            p.accumulate(&grads).unwrap();
            sgd_step(&mut p, 0.05).unwrap();
        }
        assert!((p.get(id).data()[0] - 3.0).abs() < 1e-3);
    }

    #[test]
    fn zero_momentum_matches_plain_sgd() {
        let mut a = ParamStore::<f32>::new();
        let id = a.add("w", Tensor::new(vec![3], vec![0.5, -1.0, 2.0]).unwrap()).unwrap();
        a.get_mut(id).accumulate_grad(&[0.1, 0.2, -0.3]).unwrap();
        let mut b = a.clone();
        sgd_step(&mut a, 0.01).unwrap();
        Sgd::new(0.01, 0.0).step(&mut b).unwrap();
        assert_eq!(a.get(id).data(), b.get(id).data());
    }

    #[test]
    fn momentum_accumulates_velocity() {
        let mut p = ParamStore::<f64>::new();
        let id = p.add("w", Tensor::scalar(0.0)).unwrap();
        p.get_mut(id).accumulate_grad(&[1.0]).unwrap();
        let mut opt = Sgd::new(0.1, 0.5);
        opt.step(&mut p).unwrap();
        opt.step(&mut p).unwrap();
        // v1 = 1, v2 = 1.5: w = -0.1 - 0.15
        assert!((p.get(id).item().unwrap() + 0.25).abs() < 1e-12);
    }
}
