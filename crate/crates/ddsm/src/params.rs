//! Named-tensor plumbing. Every parameter struct exposes its learnable
//! tensors under stable dotted names; gradients travel as a name -> tensor
//! map. The ordering guarantees of BTreeMap keep the optimizer, the
//! checkpoint format and the gradient checker deterministic.

use std::collections::BTreeMap;

use crate::error::{DdsmError, Result};
use crate::nn::LinearMapGrads;
use crate::tensor::Tensor;

/// Gradients keyed by the owning parameter's name.
pub type GradMap = BTreeMap<String, Tensor>;

/// Uniform access to a parameter struct's learnable tensors.
pub trait ParamSet {
    /// Stable, sorted-compatible listing of every learnable tensor.
    fn names(&self) -> Vec<String>;
    fn get(&self, name: &str) -> Option<&Tensor>;
    fn get_mut(&mut self, name: &str) -> Option<&mut Tensor>;

    fn scalar_count(&self) -> usize {
        self.names()
            .iter()
            .map(|n| self.get(n).map(Tensor::len).unwrap_or(0))
            .sum()
    }
}

/// Insert a gradient, accumulating if the slot already holds one.
pub fn add_grad(map: &mut GradMap, name: impl Into<String>, grad: Tensor) {
    let name = name.into();
    match map.get_mut(&name) {
        Some(existing) => existing
            .accumulate(&grad)
            .expect("accumulating gradients of one parameter with differing shapes"),
        None => {
            map.insert(name, grad);
        }
    }
}

/// Insert the weight/bias pair of a linear map under `prefix`.
pub fn add_linear_grads(map: &mut GradMap, prefix: &str, grads: LinearMapGrads) {
    add_grad(map, format!("{prefix}.weight"), grads.weight);
    add_grad(map, format!("{prefix}.bias"), grads.bias);
}

/// Insert the weight/bias pair of a 3x3 convolution under `prefix`.
pub fn add_conv3x3_grads(map: &mut GradMap, prefix: &str, grads: crate::nn::Conv3x3Grads) {
    add_grad(map, format!("{prefix}.weight"), grads.weight);
    add_grad(map, format!("{prefix}.bias"), grads.bias);
}

/// Move every entry of `src` into `dst` under `prefix.`.
pub fn merge_prefixed(dst: &mut GradMap, prefix: &str, src: GradMap) {
    for (name, grad) in src {
        add_grad(dst, format!("{prefix}.{name}"), grad);
    }
}

/// Scale every gradient in place.
pub fn scale_grads(map: &mut GradMap, s: f64) {
    for grad in map.values_mut() {
        for v in grad.data_mut() {
            *v *= s;
        }
    }
}

/// Accumulate every entry of `src` into `dst`.
pub fn accumulate_grads(dst: &mut GradMap, src: GradMap) {
    for (name, grad) in src {
        add_grad(dst, name, grad);
    }
}

/// Check that gradients cover exactly the parameter set and match shapes.
pub fn check_grads_cover<P: ParamSet>(params: &P, grads: &GradMap) -> Result<()> {
    for name in params.names() {
        let p = params.get(&name).expect("name listed by the set");
        match grads.get(&name) {
            None => {
                return Err(DdsmError::Shape(format!(
                    "missing gradient for parameter {name}"
                )))
            }
            Some(g) if g.shape() != p.shape() => {
                return Err(DdsmError::Shape(format!(
                    "gradient shape {:?} does not match parameter {name} {:?}",
                    g.shape(),
                    p.shape()
                )))
            }
            _ => {}
        }
    }
    if let Some(extra) = grads.keys().find(|k| params.get(k).is_none()) {
        return Err(DdsmError::Shape(format!(
            "gradient for unknown parameter {extra}"
        )));
    }
    Ok(())
}

/// Copy of every parameter tensor keyed by its dotted name.
pub fn snapshot<P: ParamSet>(params: &P) -> BTreeMap<String, Tensor> {
    params
        .names()
        .into_iter()
        .map(|n| {
            let t = params.get(&n).expect("name listed by the set").clone();
            (n, t)
        })
        .collect()
}

/// Overwrite every parameter from `named`; the names and shapes must match
/// the set exactly in both directions.
pub fn restore<P: ParamSet>(params: &mut P, named: &BTreeMap<String, Tensor>) -> Result<()> {
    for name in params.names() {
        let src = named.get(&name).ok_or_else(|| {
            DdsmError::Shape(format!("checkpoint is missing parameter {name}"))
        })?;
        let dst = params.get_mut(&name).expect("name listed by the set");
        if src.shape() != dst.shape() {
            return Err(DdsmError::Shape(format!(
                "checkpoint tensor {name} has shape {:?}, expected {:?}",
                src.shape(),
                dst.shape()
            )));
        }
        *dst = src.clone();
    }
    if let Some(extra) = named.keys().find(|k| params.get(k).is_none()) {
        return Err(DdsmError::Shape(format!(
            "checkpoint has tensor {extra} with no matching parameter"
        )));
    }
    Ok(())
}

/// Implements [`ParamSet`] for a struct from a list of
/// (dotted-name, field-path) pairs.
macro_rules! impl_params {
    ($ty:ty, $(($name:expr, $($path:tt)+)),+ $(,)?) => {
        impl crate::params::ParamSet for $ty {
            fn names(&self) -> Vec<String> {
                vec![$($name.to_string()),+]
            }
            fn get(&self, name: &str) -> Option<&crate::tensor::Tensor> {
                match name {
                    $(x if x == $name => Some(&self.$($path)+),)+
                    _ => None,
                }
            }
            fn get_mut(&mut self, name: &str) -> Option<&mut crate::tensor::Tensor> {
                match name {
                    $(x if x == $name => Some(&mut self.$($path)+),)+
                    _ => None,
                }
            }
        }
    };
}
pub(crate) use impl_params;
