//! Reverse-mode gradient tape.
//!
//! Every forward op appends a node holding its output value, the input
//! handles and a [`BackwardRule`]. `backward` walks the nodes in reverse and
//! accumulates vector-Jacobian products; a tensor consumed twice receives the
//! sum of both contributions.

use std::collections::hash_map::DefaultHasher;
use std::hash::Hasher;

use indexmap::IndexMap;

use super::{conv, ops, ConvSpec, Element, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Vector-Jacobian product of one recorded op.
pub trait BackwardRule<E: Element>: Send + Sync {
    fn name(&self) -> &'static str;

    /// One entry per input; `needs[i]` is false for inputs that do not
    /// require a gradient, and the rule may return `None` for them.
    fn backward(
        &self,
        inputs: &[&Tensor<E>],
        output: &Tensor<E>,
        grad: &Tensor<E>,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor<E>>>>;

    /// Feeds the branch each element took at a kink of the op (the sign of a
    /// leaky-ReLU input, the source cell of a bilinear tap) into `state`.
    /// Smooth ops leave it untouched.
    fn branches(&self, _inputs: &[&Tensor<E>], _output: &Tensor<E>, _state: &mut dyn Hasher) {}
}

enum Kind<E: Element> {
    Constant,
    Leaf,
    Param,
    Op(Box<dyn BackwardRule<E>>),
    Opaque(String),
}

struct Node<E: Element> {
    value: Tensor<E>,
    inputs: Vec<Var>,
    kind: Kind<E>,
    requires_grad: bool,
    label: Option<String>,
}

pub struct Tape<E: Element = f32> {
    nodes: Vec<Node<E>>,
    params: IndexMap<String, Var>,
    fault: Option<String>,
}

impl<E: Element> Default for Tape<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Element> Tape<E> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            params: IndexMap::new(),
            fault: None,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push_node(&mut self, value: Tensor<E>, inputs: Vec<Var>, kind: Kind<E>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            inputs,
            kind,
            requires_grad,
            label: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// A value that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<E>) -> Var {
        self.push_node(value, Vec::new(), Kind::Constant, false)
    }

    /// A differentiable input.
    pub fn leaf(&mut self, value: Tensor<E>) -> Var {
        self.push_node(value, Vec::new(), Kind::Leaf, true)
    }

    /// Registers a named parameter once; later calls return the same handle.
    pub fn param(&mut self, name: &str, value: &Tensor<E>) -> Var {
        if let Some(&v) = self.params.get(name) {
            return v;
        }
        let v = self.push_node(value.clone(), Vec::new(), Kind::Param, true);
        self.params.insert(name.to_string(), v);
        v
    }

    pub fn params(&self) -> &IndexMap<String, Var> {
        &self.params
    }

    /// Records an op together with its backward rule.
    pub fn push(&mut self, value: Tensor<E>, inputs: Vec<Var>, rule: Box<dyn BackwardRule<E>>) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push_node(value, inputs, Kind::Op(rule), requires_grad)
    }

    /// Records a value computed outside the tape. Gradients cannot flow
    /// through it: `backward` fails if one reaches it.
    pub fn record_opaque(&mut self, name: &str, value: Tensor<E>, inputs: Vec<Var>) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push_node(value, inputs, Kind::Opaque(name.to_string()), requires_grad)
    }

    pub fn value(&self, v: Var) -> &Tensor<E> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn label(&mut self, v: Var, name: impl Into<String>) {
        self.nodes[v.0].label = Some(name.into());
    }

    /// Labeled values in recording order with their shapes.
    pub fn labels(&self) -> Vec<(String, Vec<usize>)> {
        self.nodes
            .iter()
            .filter_map(|n| n.label.as_ref().map(|l| (l.clone(), n.value.shape().to_vec())))
            .collect()
    }

    pub fn labeled(&self, name: &str) -> Option<Var> {
        self.nodes
            .iter()
            .position(|n| n.label.as_deref() == Some(name))
            .map(Var)
    }

    /// Fingerprint of every branch taken at a kink. Two evaluations with the
    /// same fingerprint lie on one smooth piece of the recorded function.
    pub fn branch_signature(&self) -> u64 {
        let mut state = DefaultHasher::new();
        for node in &self.nodes {
            if let Kind::Op(rule) = &node.kind {
                let inputs: Vec<&Tensor<E>> = node.inputs.iter().map(|v| &self.nodes[v.0].value).collect();
                rule.branches(&inputs, &node.value, &mut state);
            }
        }
        state.finish()
    }

    /// Test hook: corrupts the gradients produced by every op named `op`.
    pub fn inject_fault(&mut self, op: &str) {
        self.fault = Some(op.to_string());
    }

    pub fn backward(&self, loss: Var) -> Result<Gradients<E>> {
        let seed = &self.nodes[loss.0].value;
        if !seed.is_scalar() {
            return Err(Error::NotScalar(seed.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<E>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(seed.shape(), E::one()));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let rule = match &node.kind {
                Kind::Op(rule) => rule,
                Kind::Opaque(name) => {
                    if grads[i].is_some() {
                        return Err(Error::UnregisteredBackward(name.clone()));
                    }
                    continue;
                }
                Kind::Constant | Kind::Leaf | Kind::Param => continue,
            };
            let Some(g) = grads[i].take() else { continue };
            let inputs: Vec<&Tensor<E>> = node.inputs.iter().map(|v| &self.nodes[v.0].value).collect();
            let needs: Vec<bool> = node.inputs.iter().map(|v| self.nodes[v.0].requires_grad).collect();
            let mut produced = rule.backward(&inputs, &node.value, &g, &needs)?;
            if produced.len() != node.inputs.len() {
                return Err(Error::InvalidArgument(format!(
                    "backward rule `{}` returned {} gradients for {} inputs",
                    rule.name(),
                    produced.len(),
                    node.inputs.len()
                )));
            }
            if self.fault.as_deref() == Some(rule.name()) {
                for t in produced.iter_mut().flatten() {
                    *t = t.scale(E::lit(0.5));
                }
            }
            for (v, dg) in node.inputs.iter().zip(produced) {
                let Some(dg) = dg else { continue };
                if !self.nodes[v.0].requires_grad {
                    continue;
                }
                match &mut grads[v.0] {
                    Some(acc) => acc.add_assign(&dg),
                    slot @ None => *slot = Some(dg),
                }
            }
        }

        Ok(Gradients {
            grads,
            params: self.params.clone(),
            param_shapes: self
                .params
                .values()
                .map(|v| self.nodes[v.0].value.shape().to_vec())
                .collect(),
        })
    }
}

/// Result of [`Tape::backward`].
pub struct Gradients<E: Element> {
    grads: Vec<Option<Tensor<E>>>,
    params: IndexMap<String, Var>,
    param_shapes: Vec<Vec<usize>>,
}

impl<E: Element> Gradients<E> {
    pub fn wrt(&self, v: Var) -> Option<&Tensor<E>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<E>> {
        self.params.get(name).and_then(|&v| self.wrt(v))
    }

    /// Gradient for every registered parameter; parameters the loss does not
    /// depend on get zeros.
    pub fn into_params(mut self) -> IndexMap<String, Tensor<E>> {
        let mut out = IndexMap::new();
        for ((name, v), shape) in self.params.iter().zip(&self.param_shapes) {
            let g = self.grads[v.0].take().unwrap_or_else(|| Tensor::zeros(shape));
            out.insert(name.clone(), g);
        }
        out
    }
}

/// Packs a stream of flags 64 to a word.
pub fn hash_flags(flags: impl Iterator<Item = bool>, state: &mut dyn Hasher) {
    let (mut word, mut n) = (0u64, 0);
    for f in flags {
        word = (word << 1) | f as u64;
        n += 1;
        if n == 64 {
            state.write_u64(word);
            (word, n) = (0, 0);
        }
    }
    state.write_u64(word);
    state.write_u8(n);
}

// ---------------------------------------------------------------------------
// Core ops

struct Conv2dRule {
    spec: ConvSpec,
    has_bias: bool,
}

impl<E: Element> BackwardRule<E> for Conv2dRule {
    fn name(&self) -> &'static str {
        "conv2d"
    }

    fn backward(&self, inputs: &[&Tensor<E>], _: &Tensor<E>, grad: &Tensor<E>, needs: &[bool]) -> Result<Vec<Option<Tensor<E>>>> {
        let (dx, dw, db) = conv::conv2d_backward(inputs[0], inputs[1], grad, &self.spec, needs[0])?;
        let mut out = vec![dx, Some(dw)];
        if self.has_bias {
            out.push(Some(db));
        }
        Ok(out)
    }
}

struct Deconv2dRule {
    spec: ConvSpec,
}

impl<E: Element> BackwardRule<E> for Deconv2dRule {
    fn name(&self) -> &'static str {
        "deconv2d"
    }

    fn backward(&self, inputs: &[&Tensor<E>], _: &Tensor<E>, grad: &Tensor<E>, needs: &[bool]) -> Result<Vec<Option<Tensor<E>>>> {
        let (dx, dw) = conv::deconv2d_backward(inputs[0], inputs[1], grad, &self.spec, needs[0])?;
        Ok(vec![dx, Some(dw)])
    }
}

struct LeakyReluRule {
    slope: f64,
}

impl<E: Element> BackwardRule<E> for LeakyReluRule {
    fn name(&self) -> &'static str {
        "leaky_relu"
    }

    fn backward(&self, inputs: &[&Tensor<E>], _: &Tensor<E>, grad: &Tensor<E>, _: &[bool]) -> Result<Vec<Option<Tensor<E>>>> {
        Ok(vec![Some(ops::leaky_relu_backward(inputs[0], grad, E::lit(self.slope)))])
    }

    fn branches(&self, inputs: &[&Tensor<E>], _: &Tensor<E>, state: &mut dyn Hasher) {
        hash_flags(inputs[0].data().iter().map(|&x| x >= E::zero()), state);
    }
}

struct SoftmaxRule;

impl<E: Element> BackwardRule<E> for SoftmaxRule {
    fn name(&self) -> &'static str {
        "channel_softmax"
    }

    fn backward(&self, _: &[&Tensor<E>], output: &Tensor<E>, grad: &Tensor<E>, _: &[bool]) -> Result<Vec<Option<Tensor<E>>>> {
        Ok(vec![Some(ops::channel_softmax_backward(output, grad)?)])
    }
}

struct NegSquareRule;

impl<E: Element> BackwardRule<E> for NegSquareRule {
    fn name(&self) -> &'static str {
        "negative_square"
    }

    fn backward(&self, inputs: &[&Tensor<E>], _: &Tensor<E>, grad: &Tensor<E>, _: &[bool]) -> Result<Vec<Option<Tensor<E>>>> {
        let two = E::lit(2.0);
        Ok(vec![Some(inputs[0].zip_map(grad, "negative_square", |x, g| -two * x * g)?)])
    }
}

struct AddRule;

impl<E: Element> BackwardRule<E> for AddRule {
    fn name(&self) -> &'static str {
        "add"
    }

    fn backward(&self, _: &[&Tensor<E>], _: &Tensor<E>, grad: &Tensor<E>, needs: &[bool]) -> Result<Vec<Option<Tensor<E>>>> {
        Ok(needs.iter().map(|&n| n.then(|| grad.clone())).collect())
    }
}

struct SubRule;

impl<E: Element> BackwardRule<E> for SubRule {
    fn name(&self) -> &'static str {
        "sub"
    }

    fn backward(&self, _: &[&Tensor<E>], _: &Tensor<E>, grad: &Tensor<E>, needs: &[bool]) -> Result<Vec<Option<Tensor<E>>>> {
        Ok(vec![needs[0].then(|| grad.clone()), needs[1].then(|| grad.scale(-E::one()))])
    }
}

struct ScaleRule {
    factor: f64,
}

impl<E: Element> BackwardRule<E> for ScaleRule {
    fn name(&self) -> &'static str {
        "scale"
    }

    fn backward(&self, _: &[&Tensor<E>], _: &Tensor<E>, grad: &Tensor<E>, _: &[bool]) -> Result<Vec<Option<Tensor<E>>>> {
        Ok(vec![Some(grad.scale(E::lit(self.factor)))])
    }
}

struct ConcatRule {
    channels: Vec<usize>,
}

impl<E: Element> BackwardRule<E> for ConcatRule {
    fn name(&self) -> &'static str {
        "concat"
    }

    fn backward(&self, _: &[&Tensor<E>], _: &Tensor<E>, grad: &Tensor<E>, needs: &[bool]) -> Result<Vec<Option<Tensor<E>>>> {
        let (_, h, w) = grad.dims3()?;
        let mut offset = 0;
        let mut out = Vec::with_capacity(self.channels.len());
        for (&c, &need) in self.channels.iter().zip(needs) {
            let n = c * h * w;
            out.push(if need {
                Some(Tensor::new(vec![c, h, w], grad.data()[offset..offset + n].to_vec())?)
            } else {
                None
            });
            offset += n;
        }
        Ok(out)
    }
}

struct Upsample2xRule;

impl<E: Element> BackwardRule<E> for Upsample2xRule {
    fn name(&self) -> &'static str {
        "upsample2x"
    }

    fn backward(&self, inputs: &[&Tensor<E>], _: &Tensor<E>, grad: &Tensor<E>, _: &[bool]) -> Result<Vec<Option<Tensor<E>>>> {
        let (_, h, w) = inputs[0].dims3()?;
        Ok(vec![Some(ops::upsample2x_bilinear_backward(grad, h, w)?)])
    }
}

/// `Σ x ⊙ c` for a constant `c`.
struct DotConstRule<E: Element> {
    weights: Tensor<E>,
}

impl<E: Element> BackwardRule<E> for DotConstRule<E> {
    fn name(&self) -> &'static str {
        "dot_const"
    }

    fn backward(&self, _: &[&Tensor<E>], _: &Tensor<E>, grad: &Tensor<E>, _: &[bool]) -> Result<Vec<Option<Tensor<E>>>> {
        Ok(vec![Some(self.weights.scale(grad.item()))])
    }
}

/// `Σ_i w_i · s_i` over scalars.
struct WeightedSumRule {
    weights: Vec<f64>,
}

impl<E: Element> BackwardRule<E> for WeightedSumRule {
    fn name(&self) -> &'static str {
        "weighted_sum"
    }

    fn backward(&self, _: &[&Tensor<E>], _: &Tensor<E>, grad: &Tensor<E>, _: &[bool]) -> Result<Vec<Option<Tensor<E>>>> {
        let g = grad.item();
        Ok(self.weights.iter().map(|&w| Some(Tensor::scalar(g * E::lit(w)))).collect())
    }
}

impl<E: Element> Tape<E> {
    pub fn conv2d(&mut self, input: Var, weights: Var, bias: Option<Var>, spec: ConvSpec) -> Result<Var> {
        let out = conv::conv2d(
            self.value(input),
            self.value(weights),
            bias.map(|b| self.value(b)),
            &spec,
        )?;
        let mut inputs = vec![input, weights];
        inputs.extend(bias);
        Ok(self.push(out, inputs, Box::new(Conv2dRule { spec, has_bias: bias.is_some() })))
    }

    pub fn deconv2d(&mut self, input: Var, weights: Var, spec: ConvSpec) -> Result<Var> {
        let out = conv::deconv2d(self.value(input), self.value(weights), &spec)?;
        Ok(self.push(out, vec![input, weights], Box::new(Deconv2dRule { spec })))
    }

    pub fn leaky_relu(&mut self, input: Var, slope: f64) -> Var {
        let out = ops::leaky_relu(self.value(input), E::lit(slope));
        self.push(out, vec![input], Box::new(LeakyReluRule { slope }))
    }

    pub fn channel_softmax(&mut self, input: Var) -> Result<Var> {
        let out = ops::channel_softmax(self.value(input))?;
        Ok(self.push(out, vec![input], Box::new(SoftmaxRule)))
    }

    pub fn negative_square(&mut self, input: Var) -> Var {
        let out = ops::negative_square(self.value(input));
        self.push(out, vec![input], Box::new(NegSquareRule))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        Ok(self.push(out, vec![a, b], Box::new(AddRule)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).sub(self.value(b))?;
        Ok(self.push(out, vec![a, b], Box::new(SubRule)))
    }

    pub fn scale(&mut self, input: Var, factor: f64) -> Var {
        let out = self.value(input).scale(E::lit(factor));
        self.push(out, vec![input], Box::new(ScaleRule { factor }))
    }

    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let tensors: Vec<&Tensor<E>> = parts.iter().map(|&v| self.value(v)).collect();
        let out = ops::concat_channels(&tensors)?;
        let channels = tensors.iter().map(|t| t.shape()[0]).collect();
        Ok(self.push(out, parts.to_vec(), Box::new(ConcatRule { channels })))
    }

    pub fn upsample2x(&mut self, input: Var) -> Result<Var> {
        let out = ops::upsample2x_bilinear(self.value(input))?;
        Ok(self.push(out, vec![input], Box::new(Upsample2xRule)))
    }

    pub fn dot_const(&mut self, input: Var, weights: Tensor<E>) -> Result<Var> {
        let out = Tensor::scalar(self.value(input).dot(&weights)?);
        Ok(self.push(out, vec![input], Box::new(DotConstRule { weights })))
    }

    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        let mut total = E::zero();
        for &(v, w) in terms {
            let t = self.value(v);
            if !t.is_scalar() {
                return Err(Error::NotScalar(t.shape().to_vec()));
            }
            total = total + t.item() * E::lit(w);
        }
        let inputs = terms.iter().map(|t| t.0).collect();
        let weights = terms.iter().map(|t| t.1).collect();
        Ok(self.push(Tensor::scalar(total), inputs, Box::new(WeightedSumRule { weights })))
    }
}
