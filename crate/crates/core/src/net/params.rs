use crate::autodiff::{Graph, Var};
use crate::tensor::Tensor;

/// Index of a tensor inside a [`ParamSet`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    /// Gradient-check / reporting group, e.g. `phase2.h_phi`.
    pub group: String,
    pub value: Tensor,
}

/// Flat, ordered store of named trainable tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    entries: Vec<Param>,
}

/// Graph handles for every parameter of one forward pass.
pub struct Bound(Vec<Var>);

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.0[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.0
    }
}

impl ParamSet {
    pub fn add(&mut self, group: &str, name: &str, value: Tensor) -> ParamId {
        debug_assert!(self.find(name).is_none(), "duplicate parameter {name}");
        self.entries.push(Param { name: name.to_string(), group: group.to_string(), value });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn entries(&self) -> &[Param] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [Param] {
        &mut self.entries
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|p| p.value.len()).sum()
    }

    /// Distinct group names in first-appearance order.
    pub fn groups(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for p in &self.entries {
            if !out.contains(&p.group) {
                out.push(p.group.clone());
            }
        }
        out
    }

    /// Places every parameter on `g` as a leaf, tracked when `track` is set.
    pub fn bind(&self, g: &mut Graph, track: bool) -> Bound {
        Bound(self.entries.iter().map(|p| g.leaf(p.value.clone().with_requires_grad(track))).collect())
    }

    /// Gradients of the bound leaves after `g.backward`, zero-filled where a
    /// parameter did not influence the loss.
    pub fn collect_grads(&self, g: &Graph, bound: &Bound) -> Vec<Vec<f64>> {
        self.entries
            .iter()
            .zip(bound.vars())
            .map(|(p, &v)| g.grad(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; p.value.len()]))
            .collect()
    }
}
