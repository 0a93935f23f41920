//! Parameters, the module visitor trait, and the basic trainable layers.

mod conv;
mod norm;
mod spectral;

use std::cell::RefCell;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Gradients, Scalar, Tensor};

pub use conv::{Conv3d, Linear};
pub use norm::{normalize, Norm, NormKind};
pub use spectral::{spectral_normalize, SpectralConv3d};

/// A named trainable tensor.
pub struct Param<T: Scalar = f32> {
    pub name: String,
    value: Tensor<T>,
}

impl<T: Scalar> Param<T> {
    pub fn new(name: impl Into<String>, value: Tensor<T>) -> Self {
        let trainable = value.requires_grad();
        Self {
            name: name.into(),
            value: value.detach().requires_grad_(trainable),
        }
    }

    /// Uniform in `[-bound, bound]`.
    pub fn uniform<R: Rng + ?Sized>(name: impl Into<String>, shape: &[usize], bound: f64, rng: &mut R) -> Self {
        Self::new(name, Tensor::uniform(shape, -bound, bound, rng).requires_grad_(true))
    }

    pub fn tensor(&self) -> &Tensor<T> {
        &self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn trainable(&self) -> bool {
        self.value.requires_grad()
    }

    pub fn set_trainable(&mut self, on: bool) {
        self.value = self.value.detach().requires_grad_(on);
    }

    /// Replaces the values, keeping shape and trainability.
    pub fn set_data(&mut self, data: Vec<T>) -> Result<()> {
        if data.len() != self.value.numel() {
            return Err(Error::shape(
                "param",
                format!("{}: {} values for shape {:?}", self.name, data.len(), self.shape()),
            ));
        }
        let trainable = self.trainable();
        self.value = Tensor::from_vec(data, self.value.shape())?.requires_grad_(trainable);
        Ok(())
    }
}

/// Non-trainable state that a forward pass may update in place.
pub struct Buffer<T: Scalar = f32> {
    pub name: String,
    pub data: RefCell<Vec<T>>,
}

impl<T: Scalar> Buffer<T> {
    pub fn new(name: impl Into<String>, data: Vec<T>) -> Self {
        Self {
            name: name.into(),
            data: RefCell::new(data),
        }
    }
}

/// Walks the parameters and buffers of a network in declaration order.
pub trait Module<T: Scalar = f32> {
    fn visit_params(&self, f: &mut dyn FnMut(&Param<T>));
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>));
    fn visit_buffers(&self, _f: &mut dyn FnMut(&Buffer<T>)) {}
}

/// Convenience queries on top of [`Module`].
pub trait ModuleExt<T: Scalar>: Module<T> {
    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |p| n += p.tensor().numel());
        n
    }

    fn param_tensors(&self) -> Vec<Tensor<T>> {
        let mut out = Vec::new();
        self.visit_params(&mut |p| out.push(p.tensor().clone()));
        out
    }

    fn param_names(&self) -> Vec<String> {
        let mut out = Vec::new();
        self.visit_params(&mut |p| out.push(p.name.clone()));
        out
    }

    fn set_trainable(&mut self, on: bool) {
        self.visit_params_mut(&mut |p| p.set_trainable(on));
    }

    fn is_frozen(&self) -> bool {
        let mut any = false;
        self.visit_params(&mut |p| any |= p.trainable());
        !any
    }

    /// Errors if any parameter is trainable or appears in `grads`.
    fn ensure_frozen(&self, grads: Option<&Gradients<T>>) -> Result<()> {
        let mut bad = None;
        self.visit_params(&mut |p| {
            let has_grad = grads.is_some_and(|g| g.contains(p.tensor()));
            if bad.is_none() && (p.trainable() || has_grad) {
                bad = Some(p.name.clone());
            }
        });
        match bad {
            Some(name) => Err(Error::Autograd(format!("frozen module parameter `{name}` received a gradient"))),
            None => Ok(()),
        }
    }

    fn is_finite(&self) -> bool {
        let mut ok = true;
        self.visit_params(&mut |p| ok &= p.tensor().data().iter().all(|v| v.is_finite()));
        ok
    }
}

impl<T: Scalar, M: Module<T> + ?Sized> ModuleExt<T> for M {}

impl<T: Scalar> Module<T> for Param<T> {
    fn visit_params(&self, f: &mut dyn FnMut(&Param<T>)) {
        f(self)
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        f(self)
    }
}

impl<T: Scalar> Module<T> for Buffer<T> {
    fn visit_params(&self, _f: &mut dyn FnMut(&Param<T>)) {}

    fn visit_params_mut(&mut self, _f: &mut dyn FnMut(&mut Param<T>)) {}

    fn visit_buffers(&self, f: &mut dyn FnMut(&Buffer<T>)) {
        f(self)
    }
}

impl<T: Scalar, M: Module<T>> Module<T> for Option<M> {
    fn visit_params(&self, f: &mut dyn FnMut(&Param<T>)) {
        if let Some(m) = self {
            m.visit_params(f)
        }
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        if let Some(m) = self {
            m.visit_params_mut(f)
        }
    }

    fn visit_buffers(&self, f: &mut dyn FnMut(&Buffer<T>)) {
        if let Some(m) = self {
            m.visit_buffers(f)
        }
    }
}

impl<T: Scalar, M: Module<T>> Module<T> for Vec<M> {
    fn visit_params(&self, f: &mut dyn FnMut(&Param<T>)) {
        self.iter().for_each(|m| m.visit_params(f))
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.iter_mut().for_each(|m| m.visit_params_mut(f))
    }

    fn visit_buffers(&self, f: &mut dyn FnMut(&Buffer<T>)) {
        self.iter().for_each(|m| m.visit_buffers(f))
    }
}

impl<T: Scalar, M: Module<T> + ?Sized> Module<T> for Box<M> {
    fn visit_params(&self, f: &mut dyn FnMut(&Param<T>)) {
        (**self).visit_params(f)
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        (**self).visit_params_mut(f)
    }

    fn visit_buffers(&self, f: &mut dyn FnMut(&Buffer<T>)) {
        (**self).visit_buffers(f)
    }
}

/// Implements [`Module`] for a struct generic over `T` by visiting the
/// listed fields in order.
#[macro_export]
macro_rules! impl_module {
    ($ty:ident { $($field:ident),* $(,)? }) => {
        impl<T: $crate::tensor::Scalar> $crate::nn::Module<T> for $ty<T> {
            fn visit_params(&self, f: &mut dyn FnMut(&$crate::nn::Param<T>)) {
                $( $crate::nn::Module::<T>::visit_params(&self.$field, f); )*
            }
            fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut $crate::nn::Param<T>)) {
                $( $crate::nn::Module::<T>::visit_params_mut(&mut self.$field, f); )*
            }
            fn visit_buffers(&self, f: &mut dyn FnMut(&$crate::nn::Buffer<T>)) {
                $( $crate::nn::Module::<T>::visit_buffers(&self.$field, f); )*
            }
        }
    };
}

/// Joins a name prefix and a field name with a dot.
pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}
