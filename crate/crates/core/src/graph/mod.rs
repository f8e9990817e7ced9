//! Computation-graph IR over dense tensors.

mod primitive;
mod tensor;
pub mod text;

use std::sync::Arc;

pub use primitive::{Primitive, Reduction, Unary};
pub(crate) use primitive::{argmax_re, matmul, matvec, matvec_t, outer, softmax_weights, transpose};
pub use tensor::{flatten, numel, unflatten, Tensor};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub type NodeId = usize;

#[derive(Clone, Debug)]
pub struct Node {
    pub primitive: Primitive,
    pub parents: Vec<NodeId>,
}

/// A validated DAG. Parents always precede their children; `Input` nodes are
/// the program arguments, in order of appearance.
#[derive(Clone, Debug)]
pub struct Graph {
    nodes: Vec<Node>,
    output: NodeId,
    shapes: Vec<Vec<usize>>,
    inputs: Vec<NodeId>,
}

/// Check topological order, arities and shapes. Returns the shape of every node.
pub fn validate(nodes: &[Node], output: NodeId) -> Result<Vec<Vec<usize>>> {
    if nodes.is_empty() {
        return Err(Error::InvalidGraph("no output: graph has no nodes".into()));
    }
    if output >= nodes.len() {
        return Err(Error::InvalidGraph(format!(
            "output index {output} is out of range ({} nodes)",
            nodes.len()
        )));
    }
    let mut shapes: Vec<Vec<usize>> = Vec::with_capacity(nodes.len());
    for (k, node) in nodes.iter().enumerate() {
        for &p in &node.parents {
            if p >= nodes.len() {
                return Err(Error::InvalidGraph(format!(
                    "node {k} has dangling parent {p}"
                )));
            }
            if p >= k {
                return Err(Error::InvalidGraph(format!(
                    "node {k} has parent {p}; parents must precede their children"
                )));
            }
        }
        let ps: Vec<&[usize]> = node.parents.iter().map(|&p| shapes[p].as_slice()).collect();
        let shape = node
            .primitive
            .output_shape(&ps)
            .map_err(|message| Error::Shape { node: k, message })?;
        if let Primitive::Constant(t) = &node.primitive {
            if !t.is_finite() {
                return Err(Error::NonFinite { node: k });
            }
        }
        shapes.push(shape);
    }
    Ok(shapes)
}

impl Graph {
    pub fn new(nodes: Vec<Node>, output: NodeId) -> Result<Self> {
        let shapes = validate(&nodes, output)?;
        let inputs = nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| matches!(n.primitive, Primitive::Input { .. }))
            .map(|(k, _)| k)
            .collect();
        Ok(Graph {
            nodes,
            output,
            shapes,
            inputs,
        })
    }

    pub fn validate(&self) -> Result<()> {
        validate(&self.nodes, self.output).map(|_| ())
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn output(&self) -> NodeId {
        self.output
    }

    pub fn num_inputs(&self) -> usize {
        self.inputs.len()
    }

    /// Node indices of the inputs.
    pub fn input_nodes(&self) -> &[NodeId] {
        &self.inputs
    }

    pub fn input_shapes(&self) -> Vec<Vec<usize>> {
        self.inputs.iter().map(|&k| self.shapes[k].clone()).collect()
    }

    pub fn shape_of(&self, k: NodeId) -> &[usize] {
        &self.shapes[k]
    }

    pub fn output_shape(&self) -> &[usize] {
        &self.shapes[self.output]
    }

    /// Total number of input scalars.
    pub fn input_dim(&self) -> usize {
        self.inputs.iter().map(|&k| numel(&self.shapes[k])).sum()
    }

    fn check_inputs<T: Scalar>(&self, inputs: &[Tensor<T>]) -> Result<()> {
        if inputs.len() != self.inputs.len() {
            return Err(Error::InvalidArgument(format!(
                "graph takes {} inputs, got {}",
                self.inputs.len(),
                inputs.len()
            )));
        }
        for (t, &k) in inputs.iter().zip(&self.inputs) {
            if t.shape() != self.shapes[k].as_slice() {
                return Err(Error::Shape {
                    node: k,
                    message: format!(
                        "input expects shape {:?}, got {:?}",
                        self.shapes[k],
                        t.shape()
                    ),
                });
            }
        }
        Ok(())
    }

    /// Values of every node up to and including the output.
    pub fn eval_trace<T: Scalar>(&self, inputs: &[Tensor<T>]) -> Result<Vec<Tensor<T>>> {
        self.check_inputs(inputs)?;
        let mut values: Vec<Tensor<T>> = Vec::with_capacity(self.output + 1);
        let mut next_input = 0;
        for (k, node) in self.nodes[..=self.output].iter().enumerate() {
            let v = match node.primitive {
                Primitive::Input { .. } => {
                    next_input += 1;
                    inputs[next_input - 1].clone()
                }
                _ => {
                    let args: Vec<&Tensor<T>> = node.parents.iter().map(|&p| &values[p]).collect();
                    node.primitive.apply(&args).map_err(|e| match e {
                        Error::NonFinite { .. } => Error::NonFinite { node: k },
                        other => other,
                    })?
                }
            };
            if !v.is_finite() {
                return Err(Error::NonFinite { node: k });
            }
            values.push(v);
        }
        Ok(values)
    }

    pub fn eval_generic<T: Scalar>(&self, inputs: &[Tensor<T>]) -> Result<Tensor<T>> {
        let mut trace = self.eval_trace(inputs)?;
        Ok(trace.swap_remove(self.output))
    }

    pub fn eval(&self, inputs: &[Tensor]) -> Result<Tensor> {
        self.eval_generic(inputs)
    }

    /// Evaluate on a flat vector holding all inputs back to back.
    pub fn eval_flat(&self, w: &[f64]) -> Result<Tensor> {
        self.eval(&unflatten(w, &self.input_shapes())?)
    }

    /// Replace every composite node by its (recursively inlined) subgraph.
    pub fn inline_composites(&self) -> Result<Graph> {
        let mut nodes: Vec<Node> = Vec::new();
        let mut map: Vec<NodeId> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let parents: Vec<NodeId> = node.parents.iter().map(|&p| map[p]).collect();
            match &node.primitive {
                Primitive::Composite(g) => {
                    let sub = g.inline_composites()?;
                    let mut sub_map = Vec::with_capacity(sub.nodes.len());
                    let mut next_input = 0;
                    for sn in &sub.nodes {
                        if let Primitive::Input { .. } = sn.primitive {
                            sub_map.push(parents[next_input]);
                            next_input += 1;
                        } else {
                            nodes.push(Node {
                                primitive: sn.primitive.clone(),
                                parents: sn.parents.iter().map(|&p| sub_map[p]).collect(),
                            });
                            sub_map.push(nodes.len() - 1);
                        }
                    }
                    map.push(sub_map[sub.output]);
                }
                other => {
                    nodes.push(Node {
                        primitive: other.clone(),
                        parents,
                    });
                    map.push(nodes.len() - 1);
                }
            }
        }
        Graph::new(nodes, map[self.output])
    }
}

/// Incremental graph construction. Every method returns the new node's id.
#[derive(Default)]
pub struct GraphBuilder {
    nodes: Vec<Node>,
}

impl GraphBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, primitive: Primitive, parents: &[NodeId]) -> NodeId {
        self.nodes.push(Node {
            primitive,
            parents: parents.to_vec(),
        });
        self.nodes.len() - 1
    }

    pub fn input(&mut self, shape: &[usize]) -> NodeId {
        self.push(Primitive::Input { shape: shape.to_vec() }, &[])
    }

    pub fn constant(&mut self, t: Tensor) -> NodeId {
        self.push(Primitive::Constant(t), &[])
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Primitive::Add, &[a, b])
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Primitive::Mul, &[a, b])
    }

    pub fn matvec(&mut self, w: NodeId, x: NodeId) -> NodeId {
        self.push(Primitive::Matvec, &[w, x])
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Primitive::Matmul, &[a, b])
    }

    pub fn unary(&mut self, u: Unary, x: NodeId) -> NodeId {
        self.push(Primitive::Elementwise(u), &[x])
    }

    pub fn exp(&mut self, x: NodeId) -> NodeId {
        self.unary(Unary::Exp, x)
    }

    pub fn sqrt(&mut self, x: NodeId) -> NodeId {
        self.unary(Unary::Sqrt, x)
    }

    pub fn square(&mut self, x: NodeId) -> NodeId {
        self.unary(Unary::Square, x)
    }

    pub fn reduce(&mut self, r: Reduction, x: NodeId) -> NodeId {
        self.push(Primitive::Reduce(r), &[x])
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        self.reduce(Reduction::Sum, x)
    }

    pub fn concat(&mut self, xs: &[NodeId]) -> NodeId {
        self.push(Primitive::Concat, xs)
    }

    pub fn slice(&mut self, x: NodeId, start: usize, len: usize) -> NodeId {
        self.push(Primitive::Slice { start, len }, &[x])
    }

    pub fn dup(&mut self, x: NodeId) -> NodeId {
        self.push(Primitive::Dup, &[x])
    }

    pub fn composite(&mut self, g: Arc<Graph>, args: &[NodeId]) -> NodeId {
        self.push(Primitive::Composite(g), args)
    }

    pub fn finish(self, output: NodeId) -> Result<Graph> {
        Graph::new(self.nodes, output)
    }
}

/// Small graphs used by tests, benchmarks and the command line.
pub mod fixtures {
    use super::*;

    /// `f(x1, x2) = x2 e^{x1} sqrt(x1 + x2 e^{x1})` with a single input of shape `[2]`.
    pub fn exp_sqrt_graph() -> Graph {
        let mut b = GraphBuilder::new();
        let x = b.input(&[2]);
        let x1 = b.slice(x, 0, 1);
        let x2 = b.slice(x, 1, 1);
        let e = b.exp(x1);
        let a = b.mul(x2, e);
        let a_dup = b.dup(a);
        let s = b.add(x1, a_dup);
        let r = b.sqrt(s);
        let y = b.mul(a, r);
        let out = b.sum(y);
        b.finish(out).expect("fixture graph is valid")
    }

    /// Analytic value of [`exp_sqrt_graph`].
    pub fn exp_sqrt_value(x1: f64, x2: f64) -> f64 {
        let a = x2 * x1.exp();
        a * (x1 + a).sqrt()
    }

    /// Analytic gradient of [`exp_sqrt_graph`].
    pub fn exp_sqrt_gradient(x1: f64, x2: f64) -> [f64; 2] {
        let e = x1.exp();
        let a = x2 * e;
        let r = (x1 + a).sqrt();
        // d/da (a r) = r + a/(2r); ds/dx1 = 1 + a, da/dx1 = a; da/dx2 = e, ds/dx2 = e
        let dx1 = a * r + a * (1.0 + a) / (2.0 * r);
        let dx2 = e * r + a * e / (2.0 * r);
        [dx1, dx2]
    }

    /// `f(w) = sum(w^2) / 2` on a vector of length `n`.
    pub fn half_sq_norm_graph(n: usize) -> Graph {
        let mut b = GraphBuilder::new();
        let w = b.input(&[n]);
        let s = b.square(w);
        let t = b.sum(s);
        let h = b.unary(Unary::Scale(0.5), t);
        b.finish(h).expect("fixture graph is valid")
    }
}

#[cfg(test)]
mod tests {
    use super::fixtures::*;
    use super::*;

    #[test]
    fn identity_graph() {
        let mut b = GraphBuilder::new();
        let x = b.input(&[3]);
        let g = b.finish(x).unwrap();
        let t = Tensor::vector(vec![1.0, 2.0, 3.0]);
        assert_eq!(g.eval(std::slice::from_ref(&t)).unwrap(), t);
    }

    #[test]
    fn exp_sqrt_example_at_origin_is_one() {
        let g = exp_sqrt_graph();
        let y = g.eval(&[Tensor::vector(vec![0.0, 1.0])]).unwrap();
        assert_eq!(y.item(), 1.0);
        assert_eq!(exp_sqrt_value(0.0, 1.0), 1.0);
    }

    #[test]
    fn matvec_identity() {
        let mut b = GraphBuilder::new();
        let x = b.input(&[2]);
        let w = b.constant(Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let y = b.matvec(w, x);
        let g = b.finish(y).unwrap();
        let out = g.eval(&[Tensor::vector(vec![3.0, -1.0])]).unwrap();
        assert_eq!(out.data(), &[3.0, -1.0]);
    }

    #[test]
    fn empty_graph_has_no_output() {
        let err = Graph::new(vec![], 0).unwrap_err();
        assert!(err.to_string().contains("no output"));
    }

    #[test]
    fn forward_reference_is_rejected() {
        let nodes = vec![
            Node { primitive: Primitive::Input { shape: vec![1] }, parents: vec![] },
            Node { primitive: Primitive::Input { shape: vec![1] }, parents: vec![] },
            Node { primitive: Primitive::Dup, parents: vec![3] },
            Node { primitive: Primitive::Add, parents: vec![0, 1] },
        ];
        let err = Graph::new(nodes, 3).unwrap_err();
        assert!(matches!(err, Error::InvalidGraph(_)));
    }

    #[test]
    fn shape_error_names_node() {
        let mut b = GraphBuilder::new();
        let x = b.input(&[2]);
        let y = b.input(&[3]);
        let z = b.add(x, y);
        match b.finish(z).unwrap_err() {
            Error::Shape { node, .. } => assert_eq!(node, 2),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn non_finite_reports_node() {
        let mut b = GraphBuilder::new();
        let x = b.input(&[1]);
        let l = b.unary(Unary::Log, x);
        let g = b.finish(l).unwrap();
        match g.eval(&[Tensor::vector(vec![-1.0])]).unwrap_err() {
            Error::NonFinite { node } => assert_eq!(node, 1),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn inlining_preserves_value() {
        let inner = Arc::new(exp_sqrt_graph());
        let mut b = GraphBuilder::new();
        let x = b.input(&[2]);
        let y = b.unary(Unary::Tanh, x);
        let c = b.composite(inner, &[y]);
        let d = b.unary(Unary::Scale(3.0), c);
        let g = b.finish(d).unwrap();
        let flat = g.inline_composites().unwrap();
        assert!(flat
            .nodes()
            .iter()
            .all(|n| !matches!(n.primitive, Primitive::Composite(_))));
        let t = Tensor::vector(vec![0.3, 0.8]);
        assert_eq!(g.eval(std::slice::from_ref(&t)).unwrap(), flat.eval(&[t]).unwrap());
    }

    #[test]
    fn eval_is_deterministic() {
        let g = exp_sqrt_graph();
        let t = Tensor::vector(vec![0.123, 0.456]);
        let a = g.eval(std::slice::from_ref(&t)).unwrap();
        let b = g.eval(&[t]).unwrap();
        assert_eq!(a.item().to_bits(), b.item().to_bits());
    }
}
