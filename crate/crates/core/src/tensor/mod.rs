//! Reverse-mode autodiff over dense f32 tensors.
//!
//! A [`Graph`] records every differentiable operation in execution order
//! (a Wengert list); [`Graph::backward`] replays it in exact reverse,
//! accumulating gradients additively wherever a tensor feeds several
//! consumers. Data is f32 end to end. For gradient verification the graph
//! can carry an f64 "shadow" of every value alongside the f32 data: the
//! finite-difference oracle in [`gradcheck`] reads function values from the
//! shadow so that its central differences are not drowned in f32 rounding
//! noise, while analytic gradients still come from the production f32 path.
//!
//! Any operation that produces NaN or Inf fails immediately with an error
//! naming the operation; there is no silent propagation.

use std::cell::{Ref, RefCell};
use std::rc::Rc;

use crate::error::{Error, Result};

pub mod gradcheck;
mod kernels;
pub mod nt1;
mod ops;

pub use gradcheck::{fd_gradients, gradcheck, GradcheckReport};
pub(crate) use ops::conv_out_extent;
pub use ops::OpKind;

/// Dense tensor handle. Cloning is cheap and aliases the same storage, which
/// is what lets one parameter feed many graph nodes and receive the sum of
/// their gradients.
#[derive(Clone)]
pub struct Tensor {
    inner: Rc<RefCell<TensorData>>,
}

pub(crate) struct TensorData {
    pub(crate) shape: Vec<usize>,
    pub(crate) data: Vec<f32>,
    /// f64 mirror of `data`, maintained only by shadow-mode graphs.
    pub(crate) shadow: Option<Vec<f64>>,
    pub(crate) grad: Option<Vec<f32>>,
    pub(crate) requires_grad: bool,
    /// True if gradients must flow through this tensor: set for leaves with
    /// `requires_grad` and for any op output with at least one such ancestor.
    pub(crate) needs_grad: bool,
}

fn check_shape(shape: &[usize], len: usize) -> Result<()> {
    if shape.is_empty() || shape.iter().any(|&e| e == 0) {
        return Err(Error::Dim(format!(
            "tensor shape must have positive extents, got {shape:?}"
        )));
    }
    let n: usize = shape.iter().product();
    if n != len {
        return Err(Error::Dim(format!(
            "shape {shape:?} implies {n} elements but {len} were provided"
        )));
    }
    Ok(())
}

impl Tensor {
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f32>, shadow: Option<Vec<f64>>) -> Tensor {
        Tensor {
            inner: Rc::new(RefCell::new(TensorData {
                shape,
                data,
                shadow,
                grad: None,
                requires_grad: false,
                needs_grad: false,
            })),
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f32>) -> Result<Tensor> {
        check_shape(shape, data.len())?;
        Ok(Tensor::from_parts(shape.to_vec(), data, None))
    }

    /// Builds a tensor from f64 values, keeping them as the shadow so a
    /// shadow-mode graph sees the full-precision inputs. The f32 data is the
    /// rounded copy.
    pub fn from_f64(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        check_shape(shape, data.len())?;
        let narrowed: Vec<f32> = data.iter().map(|&v| v as f32).collect();
        Ok(Tensor::from_parts(shape.to_vec(), narrowed, Some(data)))
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::from_parts(shape.to_vec(), vec![0.0; n], None)
    }

    pub fn full(shape: &[usize], v: f32) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::from_parts(shape.to_vec(), vec![v; n], None)
    }

    pub fn scalar(v: f32) -> Tensor {
        Tensor::from_parts(vec![1], vec![v], None)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.inner.borrow().shape.clone()
    }

    pub fn numel(&self) -> usize {
        self.inner.borrow().data.len()
    }

    pub fn to_vec(&self) -> Vec<f32> {
        self.inner.borrow().data.clone()
    }

    /// Scalar value of a one-element tensor.
    pub fn item(&self) -> f32 {
        let d = self.inner.borrow();
        assert!(d.data.len() == 1, "item() on tensor of {} elements", d.data.len());
        d.data[0]
    }

    /// Scalar value from the f64 shadow; falls back to the f32 data when the
    /// tensor never went through a shadow-mode graph.
    pub fn item_f64(&self) -> f64 {
        let d = self.inner.borrow();
        assert!(d.data.len() == 1, "item_f64() on tensor of {} elements", d.data.len());
        match &d.shadow {
            Some(s) => s[0],
            None => d.data[0] as f64,
        }
    }

    pub fn set_requires_grad(&self, flag: bool) {
        let mut d = self.inner.borrow_mut();
        d.requires_grad = flag;
        d.needs_grad = flag;
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.borrow().requires_grad
    }

    pub fn grad(&self) -> Option<Vec<f32>> {
        self.inner.borrow().grad.clone()
    }

    pub fn zero_grad(&self) {
        self.inner.borrow_mut().grad = None;
    }

    /// Overwrites the stored values in place. Only legal between graphs
    /// (optimizer steps); panics on length mismatch.
    pub fn set_data(&self, data: &[f32]) {
        let mut d = self.inner.borrow_mut();
        assert_eq!(d.data.len(), data.len(), "set_data length mismatch");
        d.data.copy_from_slice(data);
        d.shadow = None;
    }

    /// Mutates the stored values through a closure, used by the optimizer.
    pub fn update_data<F: FnOnce(&mut [f32])>(&self, f: F) {
        let mut d = self.inner.borrow_mut();
        f(&mut d.data);
        d.shadow = None;
    }

    pub(crate) fn borrow(&self) -> Ref<'_, TensorData> {
        self.inner.borrow()
    }

    pub(crate) fn needs_grad(&self) -> bool {
        self.inner.borrow().needs_grad
    }

    fn set_needs_grad_only(&self, flag: bool) {
        self.inner.borrow_mut().needs_grad = flag;
    }

    /// Adds `delta` into the gradient slot, allocating zeros on first use.
    pub(crate) fn accumulate_grad(&self, delta: &[f32]) {
        let mut d = self.inner.borrow_mut();
        assert_eq!(d.data.len(), delta.len(), "gradient length mismatch");
        match &mut d.grad {
            Some(g) => {
                for (gi, &di) in g.iter_mut().zip(delta) {
                    *gi += di;
                }
            }
            None => d.grad = Some(delta.to_vec()),
        }
    }

    /// Sets one coordinate in both precisions, used by the oracle to
    /// perturb checked tensors in place. Creates the shadow on first use.
    pub(crate) fn set_coord_f64(&self, idx: usize, v: f64) {
        let mut d = self.inner.borrow_mut();
        if d.shadow.is_none() {
            d.shadow = Some(d.data.iter().map(|&x| x as f64).collect());
        }
        d.data[idx] = v as f32;
        d.shadow.as_mut().unwrap()[idx] = v;
    }

    /// Ensures the f64 shadow exists, widening the f32 data if needed.
    pub(crate) fn ensure_shadow(&self) {
        let mut d = self.inner.borrow_mut();
        if d.shadow.is_none() {
            d.shadow = Some(d.data.iter().map(|&v| v as f64).collect());
        }
    }

    /// Identity of the underlying storage, for aliasing checks in tests.
    pub fn ptr_id(&self) -> usize {
        Rc::as_ptr(&self.inner) as usize
    }
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let d = self.inner.borrow();
        write!(
            f,
            "Tensor(shape={:?}, requires_grad={}, data[..4]={:?})",
            d.shape,
            d.requires_grad,
            &d.data[..d.data.len().min(4)]
        )
    }
}

pub(crate) struct Node {
    pub(crate) kind: OpKind,
    pub(crate) inputs: Vec<Tensor>,
    pub(crate) output: Tensor,
}

/// Records operations for reverse-mode differentiation.
///
/// Nodes are appended in execution order, which is already a topological
/// order of the data-flow DAG, so `backward` simply walks the list in
/// reverse. Only operations with at least one gradient-requiring input are
/// recorded; pure inference (`Graph::no_grad`) records nothing.
pub struct Graph {
    nodes: Vec<Node>,
    shadow: bool,
    record: bool,
}

impl Graph {
    pub fn new() -> Graph {
        Graph { nodes: Vec::new(), shadow: false, record: true }
    }

    /// Graph that carries an f64 shadow of every value, for the
    /// finite-difference oracle.
    pub fn with_shadow64() -> Graph {
        Graph { nodes: Vec::new(), shadow: true, record: true }
    }

    /// Inference-only graph: no nodes are recorded, `backward` is not
    /// available. Used by evaluation to skip gradient bookkeeping.
    pub fn no_grad() -> Graph {
        Graph { nodes: Vec::new(), shadow: false, record: false }
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub(crate) fn is_shadow(&self) -> bool {
        self.shadow
    }

    /// Registers a computed output. Checks the f32 values for NaN/Inf,
    /// propagates the needs-grad flag, and records the node when required.
    pub(crate) fn finish(
        &mut self,
        op: &'static str,
        kind: OpKind,
        inputs: &[&Tensor],
        out: Tensor,
    ) -> Result<Tensor> {
        {
            let d = out.borrow();
            if !d.data.iter().all(|v| v.is_finite()) {
                return Err(Error::NonFinite { op });
            }
        }
        let needs = self.record && inputs.iter().any(|t| t.needs_grad());
        out.set_needs_grad_only(needs);
        if needs {
            self.nodes.push(Node {
                kind,
                inputs: inputs.iter().map(|&t| t.clone()).collect(),
                output: out.clone(),
            });
        }
        Ok(out)
    }

    /// Runs reverse-mode accumulation from a scalar loss. Every tensor with
    /// `requires_grad` that the loss depends on ends up with its gradient
    /// populated; everything else is left untouched.
    pub fn backward(&self, loss: &Tensor) -> Result<()> {
        if loss.numel() != 1 {
            return Err(Error::Dim(format!(
                "backward expects a scalar loss, got shape {:?}",
                loss.shape()
            )));
        }
        loss.accumulate_grad(&[1.0]);
        for node in self.nodes.iter().rev() {
            let d_out = {
                let d = node.output.borrow();
                match &d.grad {
                    Some(g) => g.clone(),
                    // No gradient reached this output: it was not on the
                    // path from the loss. Skip without touching inputs.
                    None => continue,
                }
            };
            ops::vjp(node, &d_out)?;
        }
        Ok(())
    }
}

impl Default for Graph {
    fn default() -> Self {
        Graph::new()
    }
}
