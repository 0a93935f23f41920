use std::collections::{HashMap, HashSet};

use super::{with_grad_enabled, Scalar, Tensor};
use crate::error::{Error, Result};

/// Backward rule of one recorded operation.
pub(crate) trait BackwardOp<T: Scalar> {
    fn name(&self) -> &'static str;

    /// Gradients with respect to each input, `None` where `needs[i]` is false
    /// or the input is not differentiable.
    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Result<Vec<Option<Tensor<T>>>>;
}

pub(crate) struct BackwardCtx<'a, T: Scalar> {
    pub inputs: &'a [Tensor<T>],
    pub output: &'a Tensor<T>,
    pub grad: &'a Tensor<T>,
    pub needs: &'a [bool],
}

impl<T: Scalar> BackwardCtx<'_, T> {
    pub fn input(&self, i: usize) -> &Tensor<T> {
        &self.inputs[i]
    }

    pub fn needs(&self, i: usize) -> bool {
        self.needs.get(i).copied().unwrap_or(false)
    }
}

/// Recorded operations reachable from a root, in topological order.
///
/// Tensor ids increase with creation time and an operation's inputs always
/// exist before its output, so sorting by id is a valid topological order.
pub struct Tape<T: Scalar> {
    nodes: Vec<Tensor<T>>,
    leaves: Vec<Tensor<T>>,
}

impl<T: Scalar> Tape<T> {
    pub fn record_from(root: &Tensor<T>) -> Self {
        let mut seen = HashSet::new();
        let mut stack = vec![root.clone()];
        let mut nodes = Vec::new();
        let mut leaves = Vec::new();
        while let Some(t) = stack.pop() {
            if !seen.insert(t.id()) {
                continue;
            }
            match t.node() {
                Some(node) => {
                    stack.extend(node.inputs.iter().filter(|i| i.requires_grad()).cloned());
                    nodes.push(t);
                }
                None if t.requires_grad() => leaves.push(t),
                None => {}
            }
        }
        nodes.sort_by_key(|t| t.id());
        leaves.sort_by_key(|t| t.id());
        Self { nodes, leaves }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Operation names in topological order.
    pub fn op_names(&self) -> Vec<&'static str> {
        self.nodes.iter().filter_map(|t| t.node().map(|n| n.op.name())).collect()
    }

    pub fn leaves(&self) -> &[Tensor<T>] {
        &self.leaves
    }
}

/// Options for [`grad`].
#[derive(Debug, Clone, Copy, Default)]
pub struct GradOptions {
    /// Record the backward computation so the returned gradients are
    /// themselves differentiable. Implies `retain_graph`.
    pub create_graph: bool,
    /// Keep the graph usable for another backward pass.
    pub retain_graph: bool,
}

/// Gradients of a scalar with respect to leaf tensors, keyed by tensor id.
pub struct Gradients<T: Scalar> {
    map: HashMap<u64, Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, t: &Tensor<T>) -> Option<&Tensor<T>> {
        self.map.get(&t.id())
    }

    pub fn contains(&self, t: &Tensor<T>) -> bool {
        self.map.contains_key(&t.id())
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

impl<T: Scalar> Tensor<T> {
    /// Gradients of this scalar with respect to every leaf that requires them.
    ///
    /// The graph is consumed: calling `backward` again on the same graph is an
    /// error until the forward pass is re-run.
    pub fn backward(&self) -> Result<Gradients<T>> {
        let tape = Tape::record_from(self);
        let leaves: Vec<&Tensor<T>> = tape.leaves.iter().collect();
        let grads = run_backward(self, &tape, &leaves, GradOptions::default())?;
        let map = leaves
            .iter()
            .zip(grads)
            .filter_map(|(l, g)| g.map(|g| (l.id(), g)))
            .collect();
        Ok(Gradients { map })
    }
}

/// Gradients of the scalar `output` with respect to `wrt` (leaves or
/// intermediate tensors). Entries are `None` when `output` does not depend on
/// the corresponding tensor.
pub fn grad<T: Scalar>(
    output: &Tensor<T>,
    wrt: &[&Tensor<T>],
    opts: GradOptions,
) -> Result<Vec<Option<Tensor<T>>>> {
    let tape = Tape::record_from(output);
    run_backward(output, &tape, wrt, opts)
}

fn run_backward<T: Scalar>(
    root: &Tensor<T>,
    tape: &Tape<T>,
    wrt: &[&Tensor<T>],
    opts: GradOptions,
) -> Result<Vec<Option<Tensor<T>>>> {
    if root.numel() != 1 {
        return Err(Error::Autograd(format!(
            "backward needs a scalar loss, got shape {:?}",
            root.shape()
        )));
    }
    if !root.requires_grad() {
        return Err(Error::Autograd(
            "loss does not depend on any tensor that requires gradients (detached graph)".into(),
        ));
    }
    if let Some(t) = tape.nodes.iter().find(|t| t.node().is_some_and(|n| n.consumed.get())) {
        return Err(Error::Autograd(format!(
            "graph already consumed by a previous backward pass (at {}); re-run the forward pass",
            t.node().map(|n| n.op.name()).unwrap_or("?")
        )));
    }

    let targets: HashSet<u64> = wrt.iter().map(|t| t.id()).collect();
    // A tensor is relevant when some target is reachable through its inputs.
    let mut relevant: HashSet<u64> = HashSet::new();
    for t in &tape.nodes {
        let node = t.node().expect("tape holds recorded tensors");
        if targets.contains(&t.id())
            || node
                .inputs
                .iter()
                .any(|i| targets.contains(&i.id()) || relevant.contains(&i.id()))
        {
            relevant.insert(t.id());
        }
    }
    let leads = |t: &Tensor<T>| targets.contains(&t.id()) || relevant.contains(&t.id());

    let retain = opts.retain_graph || opts.create_graph;
    let mut grads: HashMap<u64, Tensor<T>> = HashMap::new();
    let mut found: HashMap<u64, Tensor<T>> = HashMap::new();
    grads.insert(root.id(), Tensor::ones(root.shape()));

    with_grad_enabled(opts.create_graph, || -> Result<()> {
        for t in tape.nodes.iter().rev() {
            if !relevant.contains(&t.id()) {
                continue;
            }
            let Some(g) = grads.remove(&t.id()) else {
                continue;
            };
            if targets.contains(&t.id()) {
                found.insert(t.id(), g.clone());
            }
            let node = t.node().expect("tape holds recorded tensors");
            let needs: Vec<bool> = node.inputs.iter().map(|i| i.requires_grad() && leads(i)).collect();
            if !needs.iter().any(|&n| n) {
                continue;
            }
            let ctx = BackwardCtx {
                inputs: &node.inputs,
                output: t,
                grad: &g,
                needs: &needs,
            };
            let input_grads = node.op.backward(&ctx)?;
            for ((input, gi), need) in node.inputs.iter().zip(input_grads).zip(&needs) {
                let Some(gi) = gi else { continue };
                if !need {
                    continue;
                }
                if gi.shape() != input.shape() {
                    return Err(Error::Autograd(format!(
                        "{} produced gradient of shape {:?} for input of shape {:?}",
                        node.op.name(),
                        gi.shape(),
                        input.shape()
                    )));
                }
                let acc = match grads.remove(&input.id()) {
                    Some(prev) => prev.add(&gi)?,
                    None => gi,
                };
                grads.insert(input.id(), acc);
            }
        }
        Ok(())
    })?;

    if !retain {
        for t in &tape.nodes {
            if let Some(n) = t.node() {
                n.consumed.set(true);
            }
        }
    }

    Ok(wrt
        .iter()
        .map(|t| {
            if t.id() == root.id() {
                return Some(Tensor::ones(root.shape()));
            }
            found.remove(&t.id()).or_else(|| {
                if t.is_leaf() {
                    grads.remove(&t.id())
                } else {
                    None
                }
            })
        })
        .collect())
}
