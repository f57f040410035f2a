use std::collections::HashMap;

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Option<Vec<f64>>,
    first_moment: Vec<f64>,
    second_moment: Vec<f64>,
}

/// Named trainable tensors plus Adam state, in insertion order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParameterStore {
    params: Vec<Parameter>,
    index: HashMap<String, usize>,
    step: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Step decay: the rate halves every 10 epochs (epochs counted from 0).
pub fn lr_schedule(epoch: usize, initial: f64) -> f64 {
    initial * 0.5f64.powi((epoch / 10) as i32)
}

/// Graph leaves created for one forward pass, aligned with the store order.
#[derive(Debug, Clone)]
pub struct Binding {
    vars: Vec<Var>,
    index: HashMap<String, usize>,
}

impl Binding {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.index
            .get(name)
            .map(|&i| self.vars[i])
            .ok_or_else(|| Error::Data(format!("parameter `{name}` is not bound")))
    }
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Data(format!("duplicate parameter name `{name}`")));
        }
        let n = value.numel();
        self.index.insert(name.clone(), self.params.len());
        self.params.push(Parameter { name, value, grad: None, first_moment: vec![0.0; n], second_moment: vec![0.0; n] });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Parameter> {
        self.index.get(name).map(|&i| &self.params[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Parameter> {
        self.index.get(name).map(|&i| &mut self.params[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    /// Total scalar count across all parameters.
    pub fn num_elements(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn bind(&self, graph: &mut Graph) -> Binding {
        let vars = self.params.iter().map(|p| graph.param(p.value.clone())).collect();
        Binding { vars, index: self.index.clone() }
    }

    /// Binds caller-created leaves, one per parameter in store order.
    pub fn bind_vars(&self, vars: Vec<Var>) -> Result<Binding> {
        if vars.len() != self.params.len() {
            return Err(Error::Data(format!("{} variables for {} parameters", vars.len(), self.params.len())));
        }
        Ok(Binding { vars, index: self.index.clone() })
    }

    /// Parameter values in store order.
    pub fn values(&self) -> Vec<Tensor> {
        self.params.iter().map(|p| p.value.clone()).collect()
    }

    /// Copies gradients out of `graph` after `backward`. Parameters the loss
    /// did not reach get an explicit zero gradient.
    pub fn collect_grads(&mut self, graph: &Graph, binding: &Binding) {
        for (p, &v) in self.params.iter_mut().zip(&binding.vars) {
            p.grad = Some(graph.grad(v).map_or_else(|| vec![0.0; p.value.numel()], <[f64]>::to_vec));
        }
    }

    pub fn zero_grads(&mut self) {
        self.params.iter_mut().for_each(|p| p.grad = None);
    }

    pub fn adam_step(&mut self, lr: f64, cfg: AdamConfig) -> Result<()> {
        let missing: Vec<String> = self.params.iter().filter(|p| p.grad.is_none()).map(|p| p.name.clone()).collect();
        if !missing.is_empty() {
            return Err(Error::MissingGradients(missing));
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - cfg.beta1.powi(t);
        let c2 = 1.0 - cfg.beta2.powi(t);
        for p in &mut self.params {
            let grad = p.grad.take().expect("checked above");
            let data = p.value.data_mut();
            for i in 0..data.len() {
                let g = grad[i];
                p.first_moment[i] = cfg.beta1 * p.first_moment[i] + (1.0 - cfg.beta1) * g;
                p.second_moment[i] = cfg.beta2 * p.second_moment[i] + (1.0 - cfg.beta2) * g * g;
                let m_hat = p.first_moment[i] / c1;
                let v_hat = p.second_moment[i] / c2;
                data[i] -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradients_leave_parameters_unchanged() {
        let mut store = ParameterStore::new();
        store.insert("w", Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap()).unwrap();
        let before = store.get("w").unwrap().value.clone();
        for _ in 0..5 {
            store.get_mut("w").unwrap().grad = Some(vec![0.0; 3]);
            store.adam_step(0.1, AdamConfig::default()).unwrap();
        }
        assert_eq!(store.get("w").unwrap().value, before);
    }

    #[test]
    fn adam_minimizes_scalar_quadratic() {
        let mut store = ParameterStore::new();
        store.insert("p", Tensor::scalar(0.0)).unwrap();
        for _ in 0..500 {
            let mut g = Graph::new();
            let b = store.bind(&mut g);
            let p = b.get("p").unwrap();
            let five = g.constant(Tensor::scalar(5.0));
            let diff = g.affine_combination(&[(1.0, p), (-1.0, five)]).unwrap();
            let loss = g.mul(diff, diff).unwrap();
            g.backward(loss).unwrap();
            store.collect_grads(&g, &b);
            store.adam_step(0.1, AdamConfig::default()).unwrap();
        }
        let p = store.get("p").unwrap().value.item();
        assert!((p - 5.0).abs() < 1e-3, "p = {p}");
    }

    #[test]
    fn missing_gradients_are_named() {
        let mut store = ParameterStore::new();
        store.insert("a", Tensor::scalar(1.0)).unwrap();
        store.insert("b", Tensor::scalar(1.0)).unwrap();
        store.get_mut("a").unwrap().grad = Some(vec![1.0]);
        match store.adam_step(0.1, AdamConfig::default()) {
            Err(Error::MissingGradients(names)) => assert_eq!(names, vec!["b".to_string()]),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut store = ParameterStore::new();
        store.insert("a", Tensor::scalar(1.0)).unwrap();
        assert!(store.insert("a", Tensor::scalar(2.0)).is_err());
    }

    #[test]
    fn schedule_halves_every_ten_epochs() {
        assert_eq!(lr_schedule(0, 0.001), 0.001);
        assert_eq!(lr_schedule(9, 0.001), 0.001);
        assert_eq!(lr_schedule(10, 0.001), 0.0005);
        assert!((lr_schedule(25, 0.001) - 0.00025).abs() < 1e-18);
    }
}
