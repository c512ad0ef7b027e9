use std::sync::atomic::{AtomicU64, Ordering};

use super::{Elem, Tensor};

static NEXT_PARAM_ID: AtomicU64 = AtomicU64::new(0);

/// Stable in-process identity of a trainable parameter. Checkpoints key
/// parameters by name, not id.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(u64);

impl ParamId {
    fn fresh() -> Self {
        ParamId(NEXT_PARAM_ID.fetch_add(1, Ordering::Relaxed))
    }
}

/// A named trainable tensor.
#[derive(Clone, Debug)]
pub struct Param<T> {
    id: ParamId,
    name: String,
    pub value: Tensor<T>,
}

impl<T: Elem> Param<T> {
    pub fn new(name: impl Into<String>, value: Tensor<T>) -> Self {
        Self {
            id: ParamId::fresh(),
            name: name.into(),
            value,
        }
    }

    pub fn id(&self) -> ParamId {
        self.id
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn numel(&self) -> usize {
        self.value.numel()
    }
}

/// Anything that owns trainable parameters: models, blocks, embedders.
/// Visit order is construction order and must stay stable; checkpoints and
/// the optimizer rely on it.
pub trait ParamContainer<T: Elem> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param<T>));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>));

    fn params(&self) -> Vec<&Param<T>> {
        let mut out = Vec::new();
        self.visit(&mut |p| out.push(p));
        out
    }

    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |p| n += p.numel());
        n
    }
}
