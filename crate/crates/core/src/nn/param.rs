use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use crate::tensor::{Element, Tensor};

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

/// Process-unique identity of a parameter, used to bind it on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(u64);

impl ParamId {
    fn fresh() -> Self {
        ParamId(NEXT_ID.fetch_add(1, Ordering::Relaxed))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamKind {
    Trainable,
    Frozen,
    /// Non-learned state such as running statistics; never counted as a parameter.
    Buffer,
}

#[derive(Clone, Debug)]
pub struct Param<T> {
    id: ParamId,
    kind: ParamKind,
    pub tensor: Tensor<T>,
}

impl<T: Element> Param<T> {
    pub fn new(tensor: Tensor<T>, kind: ParamKind) -> Self {
        let mut tensor = tensor;
        tensor.requires_grad = kind == ParamKind::Trainable;
        Param {
            id: ParamId::fresh(),
            kind,
            tensor,
        }
    }

    pub fn trainable(tensor: Tensor<T>) -> Self {
        Self::new(tensor, ParamKind::Trainable)
    }

    pub fn frozen(tensor: Tensor<T>) -> Self {
        Self::new(tensor, ParamKind::Frozen)
    }

    pub fn buffer(tensor: Tensor<T>) -> Self {
        Self::new(tensor, ParamKind::Buffer)
    }

    pub fn id(&self) -> ParamId {
        self.id
    }

    pub fn kind(&self) -> ParamKind {
        self.kind
    }

    pub fn is_trainable(&self) -> bool {
        self.kind == ParamKind::Trainable
    }

    /// Switches between trainable and frozen; buffers stay buffers.
    pub fn set_trainable(&mut self, on: bool) {
        if self.kind == ParamKind::Buffer {
            return;
        }
        self.kind = if on { ParamKind::Trainable } else { ParamKind::Frozen };
        self.tensor.requires_grad = on;
    }

    /// A copy with a fresh identity.
    pub fn duplicate(&self) -> Self {
        Param::new(self.tensor.clone(), self.kind)
    }
}

/// Train/inference switch (affects batch normalisation).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Anything that owns named parameters.
pub trait Module<T: Element> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a Param<T>));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>));

    fn named_params(&self) -> Vec<(String, &Param<T>)>
    where
        Self: Sized,
    {
        let mut out = Vec::new();
        self.visit("", &mut |n, p| out.push((n.to_string(), p)));
        out
    }

    fn set_trainable(&mut self, on: bool)
    where
        Self: Sized,
    {
        self.visit_mut("", &mut |_, p| p.set_trainable(on));
    }
}

pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

impl<T: Element, M: Module<T>> Module<T> for Vec<M> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a Param<T>)) {
        for (i, m) in self.iter().enumerate() {
            m.visit(&join(prefix, &i.to_string()), f);
        }
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        for (i, m) in self.iter_mut().enumerate() {
            m.visit_mut(&join(prefix, &i.to_string()), f);
        }
    }
}

impl<T: Element, M: Module<T>> Module<T> for Option<M> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a Param<T>)) {
        if let Some(m) = self {
            m.visit(prefix, f);
        }
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        if let Some(m) = self {
            m.visit_mut(prefix, f);
        }
    }
}

impl<T: Element> Module<T> for Param<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a Param<T>)) {
        f(prefix, self);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        f(prefix, self);
    }
}

/// Implements [`Module`] by visiting the listed fields under their own names.
macro_rules! impl_module {
    ($ty:ident { $($field:ident),* $(,)? }) => {
        impl<T: $crate::tensor::Element> $crate::nn::param::Module<T> for $ty<T> {
            fn visit<'a>(
                &'a self,
                prefix: &str,
                f: &mut dyn FnMut(&str, &'a $crate::nn::param::Param<T>),
            ) {
                $( self.$field.visit(&$crate::nn::param::join(prefix, stringify!($field)), f); )*
            }
            fn visit_mut(
                &mut self,
                prefix: &str,
                f: &mut dyn FnMut(&str, &mut $crate::nn::param::Param<T>),
            ) {
                $( self.$field.visit_mut(&$crate::nn::param::join(prefix, stringify!($field)), f); )*
            }
        }
    };
}
pub(crate) use impl_module;
