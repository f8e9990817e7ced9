//! Forward and reverse mode over [`Graph`], feedforward backprop, and the
//! randomized forward-mode gradient estimator.
//!
//! All passes are generic over [`Scalar`], so running them on dual numbers or
//! tape variables differentiates the differentiation.

use rand_distr::{Distribution, StandardNormal};

use crate::error::{check_len, Error, Result};
use crate::estimators::{monte_carlo, EstimatorReport};
use crate::graph::{
    argmax_re, matmul, matvec, matvec_t, numel, outer, softmax_weights, transpose, Graph,
    GraphBuilder, NodeId, Primitive, Reduction, Tensor, Unary,
};
use crate::linalg::Matrix;
use crate::scalar::Scalar;

/// Directional derivative `t_k` of every node.
#[derive(Clone, Debug)]
pub struct TangentTrace<T = f64> {
    pub values: Vec<Tensor<T>>,
    pub tangents: Vec<Tensor<T>>,
}

/// Adjoint `r_k` of every node, after accumulation over children.
#[derive(Clone, Debug)]
pub struct AdjointTrace<T = f64> {
    pub values: Vec<Tensor<T>>,
    pub adjoints: Vec<Tensor<T>>,
}

fn sum_all<T: Scalar>(t: &Tensor<T>) -> T {
    t.data().iter().cloned().fold(T::zero(), |a, b| a + b)
}

fn fill<T: Scalar>(shape: &[usize], x: T) -> Tensor<T> {
    Tensor::new(shape.to_vec(), vec![x; numel(shape)]).expect("fill shape")
}

fn expand<T: Scalar>(t: &Tensor<T>, shape: &[usize]) -> Tensor<T> {
    if t.shape() == shape {
        t.clone()
    } else {
        fill(shape, t.data()[0].clone())
    }
}

fn mul_bc<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, shape: &[usize]) -> Tensor<T> {
    let a = expand(a, shape);
    let b = expand(b, shape);
    a.zip_map(&b, |x, y| x.clone() * y.clone())
}

/// Reduce an adjoint of `out` shape onto an operand that may have been broadcast.
fn unbroadcast<T: Scalar>(r: Tensor<T>, operand_shape: &[usize]) -> Tensor<T> {
    if r.shape() == operand_shape {
        r
    } else {
        Tensor::scalar(sum_all(&r))
    }
}

/// JVP rule of a single primitive. `None` tangents are zero.
pub(crate) fn primitive_jvp<T: Scalar>(
    p: &Primitive,
    args: &[&Tensor<T>],
    out: &Tensor<T>,
    tangents: &[Option<&Tensor<T>>],
) -> Result<Option<Tensor<T>>> {
    if tangents.iter().all(|t| t.is_none()) {
        return Ok(None);
    }
    let shape = out.shape();
    let zero_like = |i: usize| Tensor::<T>::zeros(args[i].shape());
    let tan = |i: usize| tangents[i].cloned().unwrap_or_else(|| zero_like(i));
    Ok(Some(match p {
        Primitive::Input { .. } | Primitive::Constant(_) => return Ok(None),
        Primitive::Add => expand(&tan(0), shape).add(&expand(&tan(1), shape)),
        Primitive::Mul => {
            mul_bc(&tan(0), args[1], shape).add(&mul_bc(args[0], &tan(1), shape))
        }
        Primitive::Matvec => matvec(&tan(0), args[1]).add(&matvec(args[0], &tan(1))),
        Primitive::Matmul => matmul(&tan(0), args[1]).add(&matmul(args[0], &tan(1))),
        Primitive::Elementwise(u) => {
            args[0].zip_map(&tan(0), |x, t| u.derivative(x) * t.clone())
        }
        Primitive::Reduce(r) => {
            let t = tan(0);
            let xs = args[0].data();
            Tensor::scalar(match r {
                Reduction::Sum => sum_all(&t),
                Reduction::Mean => sum_all(&t).scale(1.0 / xs.len() as f64),
                Reduction::LogSumExp => softmax_weights(xs)
                    .into_iter()
                    .zip(t.data())
                    .fold(T::zero(), |a, (p, ti)| a + p * ti.clone()),
                Reduction::Max => t.data()[argmax_re(xs)].clone(),
            })
        }
        Primitive::Concat => Tensor::vector(
            (0..args.len())
                .flat_map(|i| tan(i).into_data())
                .collect(),
        ),
        Primitive::Slice { start, len } => {
            Tensor::vector(tan(0).data()[*start..start + len].to_vec())
        }
        Primitive::Dup => tan(0),
        Primitive::Composite(g) => {
            let inputs: Vec<Tensor<T>> = args.iter().map(|t| (*t).clone()).collect();
            let dirs: Vec<Tensor<T>> = (0..args.len()).map(tan).collect();
            jvp(g, &inputs, &dirs)?
        }
    }))
}

/// VJP rule of a single primitive: one cotangent per parent.
pub(crate) fn primitive_vjp<T: Scalar>(
    p: &Primitive,
    args: &[&Tensor<T>],
    _out: &Tensor<T>,
    r: &Tensor<T>,
) -> Result<Vec<Tensor<T>>> {
    Ok(match p {
        Primitive::Input { .. } | Primitive::Constant(_) => vec![],
        Primitive::Add => vec![
            unbroadcast(r.clone(), args[0].shape()),
            unbroadcast(r.clone(), args[1].shape()),
        ],
        Primitive::Mul => {
            let shape = r.shape();
            vec![
                unbroadcast(mul_bc(r, args[1], shape), args[0].shape()),
                unbroadcast(mul_bc(args[0], r, shape), args[1].shape()),
            ]
        }
        Primitive::Matvec => vec![outer(r, args[1]), matvec_t(args[0], r)],
        Primitive::Matmul => vec![
            matmul(r, &transpose(args[1])),
            matmul(&transpose(args[0]), r),
        ],
        Primitive::Elementwise(u) => {
            vec![args[0].zip_map(r, |x, ri| u.derivative(x) * ri.clone())]
        }
        Primitive::Reduce(red) => {
            let xs = args[0].data();
            let ri = r.data()[0].clone();
            let data: Vec<T> = match red {
                Reduction::Sum => vec![ri; xs.len()],
                Reduction::Mean => vec![ri.scale(1.0 / xs.len() as f64); xs.len()],
                Reduction::LogSumExp => softmax_weights(xs)
                    .into_iter()
                    .map(|p| p * ri.clone())
                    .collect(),
                Reduction::Max => {
                    let mut v = vec![T::zero(); xs.len()];
                    v[argmax_re(xs)] = ri;
                    v
                }
            };
            vec![Tensor::new(args[0].shape().to_vec(), data)?]
        }
        Primitive::Concat => {
            let mut off = 0;
            let mut parts = Vec::with_capacity(args.len());
            for a in args {
                let n = a.numel();
                parts.push(Tensor::new(a.shape().to_vec(), r.data()[off..off + n].to_vec())?);
                off += n;
            }
            parts
        }
        Primitive::Slice { start, len } => {
            let mut data = vec![T::zero(); args[0].numel()];
            for (d, v) in data[*start..start + len].iter_mut().zip(r.data()) {
                *d = v.clone();
            }
            vec![Tensor::new(args[0].shape().to_vec(), data)?]
        }
        Primitive::Dup => vec![r.clone()],
        Primitive::Composite(g) => {
            let inputs: Vec<Tensor<T>> = args.iter().map(|t| (*t).clone()).collect();
            vjp(g, &inputs, r)?
        }
    })
}

fn check_directions<T: Scalar>(graph: &Graph, dirs: &[Tensor<T>]) -> Result<()> {
    let shapes = graph.input_shapes();
    if dirs.len() != shapes.len() {
        return Err(Error::InvalidArgument(format!(
            "expected {} directions, got {}",
            shapes.len(),
            dirs.len()
        )));
    }
    for (i, (d, s)) in dirs.iter().zip(&shapes).enumerate() {
        if d.shape() != s.as_slice() {
            return Err(Error::Dimension(format!(
                "direction {i} has shape {:?}, input has {:?}",
                d.shape(),
                s
            )));
        }
    }
    Ok(())
}

/// Forward mode: tangents of every node for input directions `dirs`.
pub fn jvp_trace<T: Scalar>(
    graph: &Graph,
    inputs: &[Tensor<T>],
    dirs: &[Tensor<T>],
) -> Result<TangentTrace<T>> {
    check_directions(graph, dirs)?;
    let values = graph.eval_trace(inputs)?;
    let mut tangents: Vec<Option<Tensor<T>>> = Vec::with_capacity(values.len());
    let mut next_input = 0;
    for (k, node) in graph.nodes()[..values.len()].iter().enumerate() {
        let t = if let Primitive::Input { .. } = node.primitive {
            next_input += 1;
            Some(dirs[next_input - 1].clone())
        } else {
            let args: Vec<&Tensor<T>> = node.parents.iter().map(|&p| &values[p]).collect();
            let tans: Vec<Option<&Tensor<T>>> =
                node.parents.iter().map(|&p| tangents[p].as_ref()).collect();
            primitive_jvp(&node.primitive, &args, &values[k], &tans)?
        };
        tangents.push(t);
    }
    let tangents = tangents
        .into_iter()
        .zip(&values)
        .map(|(t, v)| t.unwrap_or_else(|| Tensor::zeros(v.shape())))
        .collect();
    Ok(TangentTrace { values, tangents })
}

/// `∂f(inputs)[dirs]`
pub fn jvp<T: Scalar>(graph: &Graph, inputs: &[Tensor<T>], dirs: &[Tensor<T>]) -> Result<Tensor<T>> {
    let mut tr = jvp_trace(graph, inputs, dirs)?;
    Ok(tr.tangents.swap_remove(graph.output()))
}

/// Reverse mode: adjoints of every node for the output seed `u`.
pub fn vjp_trace<T: Scalar>(graph: &Graph, inputs: &[Tensor<T>], u: &Tensor<T>) -> Result<AdjointTrace<T>> {
    if u.shape() != graph.output_shape() {
        return Err(Error::Dimension(format!(
            "output direction has shape {:?}, output has {:?}",
            u.shape(),
            graph.output_shape()
        )));
    }
    let values = graph.eval_trace(inputs)?;
    let out = graph.output();
    let mut adj: Vec<Option<Tensor<T>>> = vec![None; values.len()];
    adj[out] = Some(u.clone());
    for k in (0..=out).rev() {
        let node = &graph.nodes()[k];
        if node.parents.is_empty() {
            continue;
        }
        let r = match &adj[k] {
            Some(r) => r.clone(),
            None => continue,
        };
        let args: Vec<&Tensor<T>> = node.parents.iter().map(|&p| &values[p]).collect();
        let contribs = primitive_vjp(&node.primitive, &args, &values[k], &r)?;
        for (&p, c) in node.parents.iter().zip(contribs) {
            adj[p] = Some(match adj[p].take() {
                Some(acc) => acc.add(&c),
                None => c,
            });
        }
    }
    let adjoints = adj
        .into_iter()
        .zip(&values)
        .map(|(a, v)| a.unwrap_or_else(|| Tensor::zeros(v.shape())))
        .collect();
    Ok(AdjointTrace { values, adjoints })
}

/// `∂f(inputs)*[u]`, one cotangent per input.
pub fn vjp<T: Scalar>(graph: &Graph, inputs: &[Tensor<T>], u: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
    let tr = vjp_trace(graph, inputs, u)?;
    Ok(graph
        .input_nodes()
        .iter()
        .map(|&k| tr.adjoints[k].clone())
        .collect())
}

fn check_scalar(graph: &Graph) -> Result<()> {
    if numel(graph.output_shape()) != 1 {
        return Err(Error::NotScalar(graph.output_shape().to_vec()));
    }
    Ok(())
}

/// Gradient of a scalar-output graph, per input.
pub fn gradient(graph: &Graph, inputs: &[Tensor]) -> Result<Vec<Tensor>> {
    check_scalar(graph)?;
    let u = Tensor::new(graph.output_shape().to_vec(), vec![1.0])?;
    vjp(graph, inputs, &u)
}

/// Value and flat gradient at a flat input vector.
pub fn value_and_gradient_flat(graph: &Graph, w: &[f64]) -> Result<(f64, Vec<f64>)> {
    check_scalar(graph)?;
    let inputs = crate::graph::unflatten(w, &graph.input_shapes())?;
    let u = Tensor::new(graph.output_shape().to_vec(), vec![1.0])?;
    let tr = vjp_trace(graph, &inputs, &u)?;
    let value = tr.values[graph.output()].item();
    let g = graph
        .input_nodes()
        .iter()
        .flat_map(|&k| tr.adjoints[k].data().to_vec())
        .collect();
    Ok((value, g))
}

/// Flat JVP: direction and result are flattened.
pub fn jvp_flat(graph: &Graph, w: &[f64], v: &[f64]) -> Result<Vec<f64>> {
    let shapes = graph.input_shapes();
    let inputs = crate::graph::unflatten(w, &shapes)?;
    let dirs = crate::graph::unflatten(v, &shapes)?;
    Ok(jvp(graph, &inputs, &dirs)?.into_data())
}

/// Flat VJP: output seed flattened, result concatenated over inputs.
pub fn vjp_flat(graph: &Graph, w: &[f64], u: &[f64]) -> Result<Vec<f64>> {
    let inputs = crate::graph::unflatten(w, &graph.input_shapes())?;
    let u = Tensor::new(graph.output_shape().to_vec(), u.to_vec())?;
    Ok(crate::graph::flatten(&vjp(graph, &inputs, &u)?))
}

/// Full Jacobian from one JVP per input coordinate (columns).
pub fn jacobian_forward(graph: &Graph, w: &[f64]) -> Result<Matrix> {
    let p = w.len();
    let m = numel(graph.output_shape());
    let mut jac = Matrix::zeros(m, p);
    for j in 0..p {
        let mut e = vec![0.0; p];
        e[j] = 1.0;
        let col = jvp_flat(graph, w, &e)?;
        for i in 0..m {
            jac.set(i, j, col[i]);
        }
    }
    Ok(jac)
}

/// Full Jacobian from one VJP per output coordinate (rows).
pub fn jacobian_reverse(graph: &Graph, w: &[f64]) -> Result<Matrix> {
    let p = w.len();
    let m = numel(graph.output_shape());
    let mut jac = Matrix::zeros(m, p);
    for i in 0..m {
        let mut e = vec![0.0; m];
        e[i] = 1.0;
        let row = vjp_flat(graph, w, &e)?;
        for j in 0..p {
            jac.set(i, j, row[j]);
        }
    }
    Ok(jac)
}

/// A layer `s_k = f_k(s_{k-1}, w_k)` of a feedforward network.
pub trait Layer: Send + Sync {
    fn in_dim(&self) -> usize;
    fn out_dim(&self) -> usize;
    fn num_params(&self) -> usize;
    fn forward(&self, s: &[f64], w: &[f64]) -> Vec<f64>;
    /// `∂₁f[ds] + ∂₂f[dw]`
    fn jvp(&self, s: &[f64], w: &[f64], ds: &[f64], dw: &[f64]) -> Vec<f64>;
    /// `(∂₁f*[r], ∂₂f*[r])`
    fn vjp(&self, s: &[f64], w: &[f64], r: &[f64]) -> (Vec<f64>, Vec<f64>);
    /// Append the layer to a graph, creating its parameter inputs.
    fn emit(&self, b: &mut GraphBuilder, s: NodeId) -> NodeId;
}

/// `s ↦ act(A s + b)`, parameters laid out as row-major `A` then `b`.
#[derive(Clone, Debug)]
pub struct Dense {
    pub in_dim: usize,
    pub out_dim: usize,
    /// `None` is the identity.
    pub activation: Option<Unary>,
}

impl Dense {
    pub fn new(in_dim: usize, out_dim: usize, activation: Option<Unary>) -> Self {
        Dense {
            in_dim,
            out_dim,
            activation,
        }
    }

    fn pre_activation(&self, s: &[f64], w: &[f64]) -> Vec<f64> {
        let (a, b) = w.split_at(self.in_dim * self.out_dim);
        (0..self.out_dim)
            .map(|i| {
                b[i] + a[i * self.in_dim..(i + 1) * self.in_dim]
                    .iter()
                    .zip(s)
                    .map(|(x, y)| x * y)
                    .sum::<f64>()
            })
            .collect()
    }

    fn act_derivative(&self, z: f64) -> f64 {
        self.activation.map_or(1.0, |u| u.derivative(&z))
    }
}

impl Layer for Dense {
    fn in_dim(&self) -> usize {
        self.in_dim
    }
    fn out_dim(&self) -> usize {
        self.out_dim
    }
    fn num_params(&self) -> usize {
        self.out_dim * (self.in_dim + 1)
    }

    fn forward(&self, s: &[f64], w: &[f64]) -> Vec<f64> {
        let z = self.pre_activation(s, w);
        match self.activation {
            Some(u) => z.iter().map(|x| u.value(x)).collect(),
            None => z,
        }
    }

    fn jvp(&self, s: &[f64], w: &[f64], ds: &[f64], dw: &[f64]) -> Vec<f64> {
        let z = self.pre_activation(s, w);
        let n = self.in_dim;
        let (a, _) = w.split_at(n * self.out_dim);
        let (da, db) = dw.split_at(n * self.out_dim);
        (0..self.out_dim)
            .map(|i| {
                let mut dz = db[i];
                for j in 0..n {
                    dz += a[i * n + j] * ds[j] + da[i * n + j] * s[j];
                }
                self.act_derivative(z[i]) * dz
            })
            .collect()
    }

    fn vjp(&self, s: &[f64], w: &[f64], r: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let z = self.pre_activation(s, w);
        let n = self.in_dim;
        let delta: Vec<f64> = z.iter().zip(r).map(|(&zi, ri)| self.act_derivative(zi) * ri).collect();
        let mut r_prev = vec![0.0; n];
        let mut g = Vec::with_capacity(self.num_params());
        for i in 0..self.out_dim {
            for j in 0..n {
                r_prev[j] += w[i * n + j] * delta[i];
                g.push(delta[i] * s[j]);
            }
        }
        g.extend_from_slice(&delta);
        (r_prev, g)
    }

    fn emit(&self, b: &mut GraphBuilder, s: NodeId) -> NodeId {
        let a = b.input(&[self.out_dim, self.in_dim]);
        let bias = b.input(&[self.out_dim]);
        let z = b.matvec(a, s);
        let z = b.add(z, bias);
        match self.activation {
            Some(u) => b.unary(u, z),
            None => z,
        }
    }
}

/// Layers, their parameters and the network input.
pub struct FeedforwardSpec {
    pub layers: Vec<Box<dyn Layer>>,
    pub params: Vec<Vec<f64>>,
    pub input: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeedforwardGrads {
    pub input_grad: Vec<f64>,
    pub param_grads: Vec<Vec<f64>>,
}

impl FeedforwardSpec {
    pub fn validate(&self) -> Result<()> {
        if self.layers.len() != self.params.len() {
            return Err(Error::InvalidArgument(format!(
                "{} layers but {} parameter blocks",
                self.layers.len(),
                self.params.len()
            )));
        }
        let mut dim = self.input.len();
        for (k, (l, w)) in self.layers.iter().zip(&self.params).enumerate() {
            check_len(&format!("layer {k} input"), dim, l.in_dim())?;
            check_len(&format!("layer {k} parameters"), w.len(), l.num_params())?;
            dim = l.out_dim();
        }
        Ok(())
    }

    /// States `s_0, ..., s_K`.
    pub fn forward_trace(&self) -> Result<Vec<Vec<f64>>> {
        self.validate()?;
        let mut states = vec![self.input.clone()];
        for (l, w) in self.layers.iter().zip(&self.params) {
            let s = l.forward(states.last().unwrap(), w);
            states.push(s);
        }
        Ok(states)
    }

    pub fn output(&self) -> Result<Vec<f64>> {
        Ok(self.forward_trace()?.pop().unwrap())
    }

    /// Equivalent graph with inputs `x, w_1..., w_K` (each layer may add several).
    pub fn to_graph(&self) -> Result<Graph> {
        self.validate()?;
        let mut b = GraphBuilder::new();
        let mut s = b.input(&[self.input.len()]);
        for l in &self.layers {
            s = l.emit(&mut b, s);
        }
        b.finish(s)
    }

    /// The graph inputs matching [`FeedforwardSpec::to_graph`], flattened.
    pub fn graph_point(&self) -> Vec<f64> {
        let mut w = self.input.clone();
        for p in &self.params {
            w.extend_from_slice(p);
        }
        w
    }
}

/// Reverse sweep over the layers for the output cotangent `loss_grad`.
pub fn backprop_feedforward(spec: &FeedforwardSpec, loss_grad: &[f64]) -> Result<FeedforwardGrads> {
    let states = spec.forward_trace()?;
    check_len("loss gradient", loss_grad.len(), states.last().unwrap().len())?;
    let mut r = loss_grad.to_vec();
    let mut param_grads = vec![Vec::new(); spec.layers.len()];
    for k in (0..spec.layers.len()).rev() {
        let (r_prev, g) = spec.layers[k].vjp(&states[k], &spec.params[k], &r);
        param_grads[k] = g;
        r = r_prev;
    }
    Ok(FeedforwardGrads {
        input_grad: r,
        param_grads,
    })
}

/// Monte-Carlo estimate of the gradient as the mean of `∂f(w)[z] z`, `z ~ N(0, I)`.
pub fn randomized_forward_gradient(
    graph: &Graph,
    inputs: &[Tensor],
    num_samples: usize,
    seed: u64,
) -> Result<EstimatorReport> {
    check_scalar(graph)?;
    let w = crate::graph::flatten(inputs);
    check_len("inputs", w.len(), graph.input_dim())?;
    let p = w.len();
    monte_carlo(seed, num_samples, |rng| {
        let z: Vec<f64> = (0..p).map(|_| StandardNormal.sample(rng)).collect();
        let d = jvp_flat(graph, &w, &z)?[0];
        Ok(z.iter().map(|zi| d * zi).collect())
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::fixtures::*;
    use crate::linalg::dot;

    fn v(xs: &[f64]) -> Tensor {
        Tensor::vector(xs.to_vec())
    }

    #[test]
    fn square_jvp() {
        let mut b = GraphBuilder::new();
        let x = b.input(&[]);
        let y = b.square(x);
        let g = b.finish(y).unwrap();
        let t = jvp(&g, &[Tensor::scalar(3.0)], &[Tensor::scalar(1.0)]).unwrap();
        assert_eq!(t.item(), 6.0);
    }

    #[test]
    fn linear_jvp_is_matrix_product() {
        let a = Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, -1.0, 0.5, 4.0]).unwrap();
        let mut b = GraphBuilder::new();
        let x = b.input(&[3]);
        let w = b.constant(a.clone());
        let y = b.matvec(w, x);
        let g = b.finish(y).unwrap();
        let dir = v(&[0.3, -1.0, 2.0]);
        let t = jvp(&g, &[v(&[9.0, 9.0, 9.0])], std::slice::from_ref(&dir)).unwrap();
        let expect = Matrix::new(2, 3, a.data().to_vec()).unwrap().matvec(dir.data());
        assert_eq!(t.data(), expect.as_slice());
    }

    #[test]
    fn example_graph_gradient_matches_closed_form() {
        let g = exp_sqrt_graph();
        for (a, b) in [(0.0, 1.0), (0.4, 0.7), (-0.3, 2.0)] {
            let gr = gradient(&g, &[v(&[a, b])]).unwrap();
            let ex = exp_sqrt_gradient(a, b);
            assert!((gr[0].data()[0] - ex[0]).abs() < 1e-12);
            assert!((gr[0].data()[1] - ex[1]).abs() < 1e-12);
        }
    }

    #[test]
    fn inner_product_gradient() {
        let a = v(&[1.0, -2.0, 0.5]);
        let mut b = GraphBuilder::new();
        let x = b.input(&[3]);
        let c = b.constant(a.clone());
        let m = b.mul(x, c);
        let s = b.sum(m);
        let g = b.finish(s).unwrap();
        assert_eq!(gradient(&g, &[v(&[4.0, 5.0, 6.0])]).unwrap()[0], a);
    }

    #[test]
    fn logistic_loss_gradient() {
        // f(θ) = logsumexp(θ) - <y, θ>, ∇f = softargmax(θ) - y
        let theta = [1.0, 0.0, -1.0];
        let y = v(&[1.0, 0.0, 0.0]);
        let mut b = GraphBuilder::new();
        let t = b.input(&[3]);
        let lse = b.reduce(Reduction::LogSumExp, t);
        let yc = b.constant(y.clone());
        let ty = b.mul(t, yc);
        let s = b.sum(ty);
        let ns = b.unary(Unary::Neg, s);
        let f = b.add(lse, ns);
        let g = b.finish(f).unwrap();
        let gr = gradient(&g, &[v(&theta)]).unwrap();
        let z: f64 = theta.iter().map(|x: &f64| x.exp()).sum();
        for i in 0..3 {
            let expect = theta[i].exp() / z - y.data()[i];
            assert!((gr[0].data()[i] - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn linear_regression_gradient() {
        // L(w) = ||Xw - y||^2, X = I, y = (1,1), w = 0 → (-2,-2)
        let mut b = GraphBuilder::new();
        let w = b.input(&[2]);
        let x = b.constant(Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let y = b.constant(v(&[-1.0, -1.0]));
        let xw = b.matvec(x, w);
        let r = b.add(xw, y);
        let sq = b.square(r);
        let l = b.sum(sq);
        let g = b.finish(l).unwrap();
        assert_eq!(gradient(&g, &[v(&[0.0, 0.0])]).unwrap()[0].data(), &[-2.0, -2.0]);
    }

    #[test]
    fn gradient_rejects_vector_output() {
        let mut b = GraphBuilder::new();
        let x = b.input(&[2]);
        let g = b.finish(x).unwrap();
        assert!(matches!(gradient(&g, &[v(&[1.0, 2.0])]), Err(Error::NotScalar(_))));
    }

    #[test]
    fn half_norm_gradient_is_identity() {
        let g = half_sq_norm_graph(4);
        let w = v(&[1.0, -2.0, 3.0, 0.5]);
        assert_eq!(gradient(&g, std::slice::from_ref(&w)).unwrap()[0], w);
    }

    #[test]
    fn fan_out_through_dup_sums_branches() {
        // f(x) = sum(x*x) written with and without an explicit dup
        let mut b = GraphBuilder::new();
        let x = b.input(&[3]);
        let d = b.dup(x);
        let m = b.mul(x, d);
        let s = b.sum(m);
        let g1 = b.finish(s).unwrap();
        let mut b = GraphBuilder::new();
        let x = b.input(&[3]);
        let m = b.square(x);
        let s = b.sum(m);
        let g2 = b.finish(s).unwrap();
        let w = v(&[0.5, -1.5, 2.0]);
        assert_eq!(gradient(&g1, std::slice::from_ref(&w)).unwrap(), gradient(&g2, &[w]).unwrap());
    }

    fn mlp_spec(seed: u64) -> FeedforwardSpec {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let layers: Vec<Box<dyn Layer>> = vec![
            Box::new(Dense::new(3, 4, Some(Unary::Tanh))),
            Box::new(Dense::new(4, 2, Some(Unary::Softplus))),
        ];
        let params = layers
            .iter()
            .map(|l| (0..l.num_params()).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        FeedforwardSpec {
            layers,
            params,
            input: vec![0.2, -0.4, 0.9],
        }
    }

    #[test]
    fn one_layer_input_gradient_closed_form() {
        // r0 = A^T (σ'(A s0 + b) ⊙ r1) with σ = logistic
        let layer = Dense::new(2, 2, Some(Unary::Logistic));
        let w = vec![0.5, -1.0, 2.0, 0.3, 0.1, -0.2];
        let s0 = vec![0.7, -0.4];
        let r1 = vec![1.0, -2.0];
        let spec = FeedforwardSpec {
            layers: vec![Box::new(layer)],
            params: vec![w.clone()],
            input: s0.clone(),
        };
        let grads = backprop_feedforward(&spec, &r1).unwrap();
        let a = Matrix::new(2, 2, w[..4].to_vec()).unwrap();
        let z = crate::linalg::add(&a.matvec(&s0), &w[4..]);
        let delta: Vec<f64> = z
            .iter()
            .zip(&r1)
            .map(|(&zi, ri)| {
                let s = 1.0 / (1.0 + (-zi).exp());
                s * (1.0 - s) * ri
            })
            .collect();
        let expect = a.matvec_t(&delta);
        for i in 0..2 {
            assert!((grads.input_grad[i] - expect[i]).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_loss_grad_gives_zero_grads() {
        let spec = mlp_spec(1);
        let g = backprop_feedforward(&spec, &[0.0, 0.0]).unwrap();
        assert!(g.input_grad.iter().all(|&x| x == 0.0));
        assert!(g.param_grads.iter().flatten().all(|&x| x == 0.0));
    }

    #[test]
    fn backprop_matches_graph_vjp() {
        let spec = mlp_spec(7);
        let u = [0.3, -1.1];
        let grads = backprop_feedforward(&spec, &u).unwrap();
        let graph = spec.to_graph().unwrap();
        let flat = vjp_flat(&graph, &spec.graph_point(), &u).unwrap();
        let mut expect = grads.input_grad.clone();
        for g in &grads.param_grads {
            expect.extend_from_slice(g);
        }
        assert_eq!(flat.len(), expect.len());
        for (a, b) in flat.iter().zip(&expect) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn layer_jvp_vjp_adjoint_identity() {
        let spec = mlp_spec(3);
        let l = &spec.layers[0];
        let w = &spec.params[0];
        let s = &spec.input;
        let ds = [0.1, 0.2, -0.3];
        let dw: Vec<f64> = (0..w.len()).map(|i| (i as f64 * 0.37).sin()).collect();
        let r = [0.5, -0.25, 1.0, 2.0];
        let lhs = dot(&l.jvp(s, w, &ds, &dw), &r);
        let (rs, rw) = l.vjp(s, w, &r);
        let rhs = dot(&ds, &rs) + dot(&dw, &rw);
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn randomized_gradient_of_constant_is_zero() {
        let mut b = GraphBuilder::new();
        let x = b.input(&[3]);
        let c = b.constant(Tensor::scalar(2.0));
        let z = b.unary(Unary::Scale(0.0), x);
        let s = b.sum(z);
        let f = b.add(s, c);
        let g = b.finish(f).unwrap();
        let rep = randomized_forward_gradient(&g, &[v(&[1.0, 2.0, 3.0])], 100, 5).unwrap();
        assert!(rep.estimate.iter().all(|&x| x == 0.0));
    }
}
