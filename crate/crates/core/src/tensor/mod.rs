//! Minimal reverse-mode autodiff over dynamic-dimension `ndarray` arrays.
//!
//! A [`Tape`] records every produced value together with a backward closure.
//! Nodes are pushed in topological order, so [`Tape::backward`] is a single
//! reverse sweep. The engine is generic over [`Scalar`] so training can run
//! in `f32` while numeric verification runs in `f64`.

pub mod conv;
pub mod gradcheck;
pub mod lossops;
pub mod norm;
pub mod spatial;

use std::cell::RefCell;
use std::fmt::{Debug, Display};
use std::rc::Rc;

use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, ArrayD, ArrayView2, Ix1, Ix2};
use num_traits::Float;

/// Element type of the engine: `f32` for training, `f64` for verification.
pub trait Scalar:
    Float + ndarray::LinalgScalar + ndarray::ScalarOperand + Debug + Display + 'static
{
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn from_usize(n: usize) -> Self {
        Self::from_f64(n as f64)
    }
}

impl Scalar for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
}

/// Handle into a [`Tape`]. Cheap to copy; only valid for the tape that made it.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Tensor(pub(crate) usize);

type BackwardFn<S> = Box<dyn Fn(&ArrayD<S>, &mut Grads<S>)>;

struct Node<S: Scalar> {
    value: Rc<ArrayD<S>>,
    requires_grad: bool,
    backward: Option<BackwardFn<S>>,
}

/// Gradient accumulator produced by [`Tape::backward`].
pub struct Grads<S: Scalar> {
    slots: Vec<Option<ArrayD<S>>>,
    wanted: Vec<bool>,
}

impl<S: Scalar> Grads<S> {
    /// Whether gradient flow into `t` is tracked at all.
    pub fn wants(&self, t: Tensor) -> bool {
        self.wanted[t.0]
    }

    /// Adds `g` into the slot for `t`; no-op when `t` does not require grad.
    pub fn accumulate(&mut self, t: Tensor, g: ArrayD<S>) {
        self.accumulate_with(t, || g)
    }

    /// Lazy variant of [`Grads::accumulate`]: `f` only runs when needed.
    pub fn accumulate_with<F: FnOnce() -> ArrayD<S>>(&mut self, t: Tensor, f: F) {
        if !self.wanted[t.0] {
            return;
        }
        let g = f();
        match &mut self.slots[t.0] {
            Some(acc) => {
                debug_assert_eq!(acc.shape(), g.shape());
                acc.zip_mut_with(&g, |a, &b| *a = *a + b);
            }
            slot @ None => *slot = Some(g),
        }
    }

    pub fn get(&self, t: Tensor) -> Option<&ArrayD<S>> {
        self.slots[t.0].as_ref()
    }

    pub fn take(&mut self, t: Tensor) -> Option<ArrayD<S>> {
        self.slots[t.0].take()
    }
}

/// Records values and backward closures for one forward computation.
pub struct Tape<S: Scalar> {
    nodes: RefCell<Vec<Node<S>>>,
    grad_enabled: bool,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape { nodes: RefCell::new(Vec::new()), grad_enabled: true }
    }

    /// A tape that tracks no gradients; useful for inference.
    pub fn no_grad() -> Self {
        Tape { nodes: RefCell::new(Vec::new()), grad_enabled: false }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push_rc(
        &self,
        value: Rc<ArrayD<S>>,
        requires_grad: bool,
        backward: Option<BackwardFn<S>>,
    ) -> Tensor {
        debug_assert!(value.is_standard_layout());
        let rg = requires_grad && self.grad_enabled;
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, requires_grad: rg, backward: if rg { backward } else { None } });
        Tensor(nodes.len() - 1)
    }

    fn push(&self, value: ArrayD<S>, requires_grad: bool, backward: Option<BackwardFn<S>>) -> Tensor {
        self.push_rc(Rc::new(value), requires_grad, backward)
    }

    /// Registers an owned array as a graph input.
    pub fn leaf(&self, value: ArrayD<S>, requires_grad: bool) -> Tensor {
        let value = if value.is_standard_layout() {
            value
        } else {
            value.as_standard_layout().to_owned()
        };
        self.push(value, requires_grad, None)
    }

    /// Registers a shared array without copying (used for network parameters).
    pub fn leaf_shared(&self, value: Rc<ArrayD<S>>, requires_grad: bool) -> Tensor {
        assert!(value.is_standard_layout(), "shared leaves must be standard layout");
        self.push_rc(value, requires_grad, None)
    }

    /// Zero-dimensional constant.
    pub fn scalar(&self, v: S) -> Tensor {
        self.leaf(ArrayD::from_elem(Vec::<usize>::new(), v), false)
    }

    pub fn value(&self, t: Tensor) -> Rc<ArrayD<S>> {
        Rc::clone(&self.nodes.borrow()[t.0].value)
    }

    pub fn shape(&self, t: Tensor) -> Vec<usize> {
        self.nodes.borrow()[t.0].value.shape().to_vec()
    }

    pub fn requires_grad(&self, t: Tensor) -> bool {
        self.nodes.borrow()[t.0].requires_grad
    }

    /// Scalar value of a 0-d (or single-element) tensor.
    pub fn item(&self, t: Tensor) -> S {
        let v = self.value(t);
        assert_eq!(v.len(), 1, "item() needs a single-element tensor");
        *v.iter().next().unwrap()
    }

    /// Re-registers the value of `t` as a constant, cutting gradient flow.
    pub fn detach(&self, t: Tensor) -> Tensor {
        let v = self.value(t);
        self.push_rc(v, false, None)
    }

    /// Reverse sweep from `loss`. The returned store holds gradients for every
    /// tensor that required grad and was reached.
    pub fn backward(&self, loss: Tensor) -> Grads<S> {
        let nodes = self.nodes.borrow();
        assert!(
            nodes[loss.0].requires_grad,
            "backward() from a tensor that does not require grad"
        );
        let mut grads = Grads {
            slots: (0..nodes.len()).map(|_| None).collect(),
            wanted: nodes.iter().map(|n| n.requires_grad).collect(),
        };
        grads.slots[loss.0] = Some(ArrayD::from_elem(nodes[loss.0].value.shape(), S::one()));
        for i in (0..=loss.0).rev() {
            if grads.slots[i].is_none() {
                continue;
            }
            if let Some(bw) = &nodes[i].backward {
                let g = grads.slots[i].take().unwrap();
                bw(&g, &mut grads);
                grads.slots[i] = Some(g);
            }
        }
        grads
    }

    // ---- elementwise ----

    fn binary_same_shape(&self, a: Tensor, b: Tensor, name: &str) -> (Rc<ArrayD<S>>, Rc<ArrayD<S>>) {
        let va = self.value(a);
        let vb = self.value(b);
        assert_eq!(va.shape(), vb.shape(), "{name}: operand shapes differ");
        (va, vb)
    }

    pub fn add(&self, a: Tensor, b: Tensor) -> Tensor {
        let (va, vb) = self.binary_same_shape(a, b, "add");
        let out = &*va + &*vb;
        let rg = self.requires_grad(a) || self.requires_grad(b);
        self.push(
            out,
            rg,
            Some(Box::new(move |g, gr| {
                gr.accumulate_with(a, || g.clone());
                gr.accumulate_with(b, || g.clone());
            })),
        )
    }

    pub fn sub(&self, a: Tensor, b: Tensor) -> Tensor {
        let (va, vb) = self.binary_same_shape(a, b, "sub");
        let out = &*va - &*vb;
        let rg = self.requires_grad(a) || self.requires_grad(b);
        self.push(
            out,
            rg,
            Some(Box::new(move |g, gr| {
                gr.accumulate_with(a, || g.clone());
                gr.accumulate_with(b, || g.mapv(|x| -x));
            })),
        )
    }

    pub fn mul(&self, a: Tensor, b: Tensor) -> Tensor {
        let (va, vb) = self.binary_same_shape(a, b, "mul");
        let out = &*va * &*vb;
        let rg = self.requires_grad(a) || self.requires_grad(b);
        self.push(
            out,
            rg,
            Some(Box::new(move |g, gr| {
                gr.accumulate_with(a, || g * &*vb);
                gr.accumulate_with(b, || g * &*va);
            })),
        )
    }

    pub fn add_scalar(&self, a: Tensor, c: S) -> Tensor {
        let va = self.value(a);
        let out = va.mapv(|x| x + c);
        self.push(
            out,
            self.requires_grad(a),
            Some(Box::new(move |g, gr| gr.accumulate_with(a, || g.clone()))),
        )
    }

    pub fn mul_scalar(&self, a: Tensor, c: S) -> Tensor {
        let va = self.value(a);
        let out = va.mapv(|x| x * c);
        self.push(
            out,
            self.requires_grad(a),
            Some(Box::new(move |g, gr| gr.accumulate_with(a, || g.mapv(|x| x * c)))),
        )
    }

    pub fn neg(&self, a: Tensor) -> Tensor {
        self.mul_scalar(a, -S::one())
    }

    pub fn exp(&self, a: Tensor) -> Tensor {
        let va = self.value(a);
        let out = Rc::new(va.mapv(|x| x.exp()));
        let cap = Rc::clone(&out);
        self.push_rc(
            out,
            self.requires_grad(a),
            Some(Box::new(move |g, gr| gr.accumulate_with(a, || g * &*cap))),
        )
    }

    /// `ln(x + eps)`; the guard keeps gradients finite near zero.
    pub fn ln_guarded(&self, a: Tensor, eps: S) -> Tensor {
        let va = self.value(a);
        let out = va.mapv(|x| (x + eps).ln());
        let cap = Rc::clone(&va);
        self.push(
            out,
            self.requires_grad(a),
            Some(Box::new(move |g, gr| {
                gr.accumulate_with(a, || {
                    let mut dg = g.clone();
                    dg.zip_mut_with(&cap, |d, &x| *d = *d / (x + eps));
                    dg
                })
            })),
        )
    }

    pub fn relu(&self, a: Tensor) -> Tensor {
        let va = self.value(a);
        let out = va.mapv(|x| x.max(S::zero()));
        let cap = Rc::clone(&va);
        self.push(
            out,
            self.requires_grad(a),
            Some(Box::new(move |g, gr| {
                gr.accumulate_with(a, || {
                    let mut dg = g.clone();
                    dg.zip_mut_with(&cap, |d, &x| {
                        if x <= S::zero() {
                            *d = S::zero();
                        }
                    });
                    dg
                })
            })),
        )
    }

    pub fn clamp(&self, a: Tensor, lo: S, hi: S) -> Tensor {
        let va = self.value(a);
        let out = va.mapv(|x| x.max(lo).min(hi));
        let cap = Rc::clone(&va);
        self.push(
            out,
            self.requires_grad(a),
            Some(Box::new(move |g, gr| {
                gr.accumulate_with(a, || {
                    let mut dg = g.clone();
                    dg.zip_mut_with(&cap, |d, &x| {
                        if x <= lo || x >= hi {
                            *d = S::zero();
                        }
                    });
                    dg
                })
            })),
        )
    }

    // ---- reductions ----

    pub fn sum_all(&self, a: Tensor) -> Tensor {
        let va = self.value(a);
        let shape = va.shape().to_vec();
        let out = ArrayD::from_elem(Vec::<usize>::new(), va.sum());
        self.push(
            out,
            self.requires_grad(a),
            Some(Box::new(move |g, gr| {
                let gv = *g.iter().next().unwrap();
                gr.accumulate_with(a, || ArrayD::from_elem(shape.as_slice(), gv));
            })),
        )
    }

    pub fn mean_all(&self, a: Tensor) -> Tensor {
        let va = self.value(a);
        let n = S::from_usize(va.len());
        let s = self.sum_all(a);
        self.mul_scalar(s, S::one() / n)
    }

    // ---- shape ----

    pub fn reshape(&self, a: Tensor, shape: &[usize]) -> Tensor {
        let va = self.value(a);
        let old_shape = va.shape().to_vec();
        assert_eq!(
            va.len(),
            shape.iter().product::<usize>(),
            "reshape: element count mismatch"
        );
        let out = ArrayD::from_shape_vec(shape, va.iter().copied().collect()).unwrap();
        self.push(
            out,
            self.requires_grad(a),
            Some(Box::new(move |g, gr| {
                gr.accumulate_with(a, || {
                    ArrayD::from_shape_vec(old_shape.as_slice(), g.iter().copied().collect())
                        .unwrap()
                })
            })),
        )
    }

    /// Concatenates two `[N, C, ...]` tensors along the channel axis.
    pub fn concat_channels(&self, a: Tensor, b: Tensor) -> Tensor {
        let va = self.value(a);
        let vb = self.value(b);
        assert!(va.ndim() >= 2 && vb.ndim() == va.ndim());
        assert_eq!(va.shape()[0], vb.shape()[0], "concat_channels: batch mismatch");
        assert_eq!(&va.shape()[2..], &vb.shape()[2..], "concat_channels: spatial mismatch");
        let ca = va.shape()[1];
        let out = ndarray::concatenate(ndarray::Axis(1), &[va.view(), vb.view()])
            .expect("concat_channels")
            .as_standard_layout()
            .to_owned();
        let rg = self.requires_grad(a) || self.requires_grad(b);
        self.push(
            out,
            rg,
            Some(Box::new(move |g, gr| {
                gr.accumulate_with(a, || {
                    g.slice_axis(ndarray::Axis(1), ndarray::Slice::from(..ca))
                        .as_standard_layout()
                        .to_owned()
                });
                gr.accumulate_with(b, || {
                    g.slice_axis(ndarray::Axis(1), ndarray::Slice::from(ca..))
                        .as_standard_layout()
                        .to_owned()
                });
            })),
        )
    }

    // ---- 2-d linear algebra ----

    /// `a [A,E] x b [K,E]^T -> [A,K]`, the similarity-matrix shape.
    pub fn matmul_nt(&self, a: Tensor, b: Tensor) -> Tensor {
        let va = self.value(a);
        let vb = self.value(b);
        let (am, ae) = dims2(&va, "matmul_nt lhs");
        let (bk, be) = dims2(&vb, "matmul_nt rhs");
        assert_eq!(ae, be, "matmul_nt: inner dimensions differ");
        let mut out = Array2::<S>::zeros((am, bk));
        general_mat_mul(S::one(), &as2(&va), &as2(&vb).t(), S::zero(), &mut out);
        let rg = self.requires_grad(a) || self.requires_grad(b);
        let (cva, cvb) = (Rc::clone(&va), Rc::clone(&vb));
        self.push(
            out.into_dyn(),
            rg,
            Some(Box::new(move |g, gr| {
                let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                gr.accumulate_with(a, || {
                    let mut da = Array2::<S>::zeros((am, ae));
                    general_mat_mul(S::one(), &g2, &as2(&cvb), S::zero(), &mut da);
                    da.into_dyn()
                });
                gr.accumulate_with(b, || {
                    let mut db = Array2::<S>::zeros((bk, be));
                    general_mat_mul(S::one(), &g2.t(), &as2(&cva), S::zero(), &mut db);
                    db.into_dyn()
                });
            })),
        )
    }

    /// Row-wise dot product of two `[A,E]` tensors -> `[A]`.
    pub fn rowwise_dot(&self, a: Tensor, b: Tensor) -> Tensor {
        let (va, vb) = self.binary_same_shape(a, b, "rowwise_dot");
        let (rows, _) = dims2(&va, "rowwise_dot");
        let a2 = as2(&va);
        let b2 = as2(&vb);
        let out: Vec<S> = (0..rows).map(|i| a2.row(i).dot(&b2.row(i))).collect();
        let rg = self.requires_grad(a) || self.requires_grad(b);
        let (cva, cvb) = (Rc::clone(&va), Rc::clone(&vb));
        self.push(
            ArrayD::from_shape_vec(vec![rows], out).unwrap(),
            rg,
            Some(Box::new(move |g, gr| {
                let g1 = g.view().into_dimensionality::<Ix1>().unwrap();
                gr.accumulate_with(a, || {
                    let mut da = as2(&cvb).to_owned();
                    for (i, mut row) in da.rows_mut().into_iter().enumerate() {
                        row.mapv_inplace(|x| x * g1[i]);
                    }
                    da.into_dyn()
                });
                gr.accumulate_with(b, || {
                    let mut db = as2(&cva).to_owned();
                    for (i, mut row) in db.rows_mut().into_iter().enumerate() {
                        row.mapv_inplace(|x| x * g1[i]);
                    }
                    db.into_dyn()
                });
            })),
        )
    }

    /// Sums a `[A,K]` tensor over its columns -> `[A]`.
    pub fn sum_cols(&self, a: Tensor) -> Tensor {
        let va = self.value(a);
        let (rows, cols) = dims2(&va, "sum_cols");
        let a2 = as2(&va);
        let out: Vec<S> = (0..rows).map(|i| a2.row(i).sum()).collect();
        self.push(
            ArrayD::from_shape_vec(vec![rows], out).unwrap(),
            self.requires_grad(a),
            Some(Box::new(move |g, gr| {
                let g1 = g.view().into_dimensionality::<Ix1>().unwrap();
                gr.accumulate_with(a, || {
                    let mut da = Array2::<S>::zeros((rows, cols));
                    for (i, mut row) in da.rows_mut().into_iter().enumerate() {
                        row.fill(g1[i]);
                    }
                    da.into_dyn()
                })
            })),
        )
    }

    /// Gathers per-voxel feature vectors from a `[N, C, spatial...]` tensor.
    /// Each `(sample, linear_voxel)` pair yields one `[C]` row.
    pub fn gather_voxels(&self, a: Tensor, picks: &[(usize, usize)]) -> Tensor {
        let va = self.value(a);
        assert!(va.ndim() >= 3, "gather_voxels needs [N, C, spatial...]");
        let n = va.shape()[0];
        let c = va.shape()[1];
        let sp: usize = va.shape()[2..].iter().product();
        let flat = va.as_slice().unwrap();
        let mut out = Array2::<S>::zeros((picks.len(), c));
        for (row, &(ni, vi)) in picks.iter().enumerate() {
            assert!(ni < n && vi < sp, "gather_voxels: pick out of range");
            let base = ni * c * sp + vi;
            for ch in 0..c {
                out[[row, ch]] = flat[base + ch * sp];
            }
        }
        let picks: Vec<(usize, usize)> = picks.to_vec();
        let in_shape = va.shape().to_vec();
        self.push(
            out.into_dyn(),
            self.requires_grad(a),
            Some(Box::new(move |g, gr| {
                let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                gr.accumulate_with(a, || {
                    let mut da = ArrayD::<S>::zeros(in_shape.as_slice());
                    let dflat = da.as_slice_mut().unwrap();
                    for (row, &(ni, vi)) in picks.iter().enumerate() {
                        let base = ni * c * sp + vi;
                        for ch in 0..c {
                            dflat[base + ch * sp] = dflat[base + ch * sp] + g2[[row, ch]];
                        }
                    }
                    da
                })
            })),
        )
    }
}

pub(crate) fn dims2<S: Scalar>(a: &ArrayD<S>, what: &str) -> (usize, usize) {
    assert_eq!(a.ndim(), 2, "{what}: expected a 2-d tensor, got {}-d", a.ndim());
    (a.shape()[0], a.shape()[1])
}

pub(crate) fn as2<S: Scalar>(a: &ArrayD<S>) -> ArrayView2<'_, S> {
    a.view().into_dimensionality::<Ix2>().unwrap()
}

/// Dimensions of a `[N, C, D, H, W]` tensor.
pub(crate) fn dims5<S: Scalar>(a: &ArrayD<S>, what: &str) -> (usize, usize, usize, usize, usize) {
    assert_eq!(a.ndim(), 5, "{what}: expected [N,C,D,H,W], got {}-d", a.ndim());
    let s = a.shape();
    (s[0], s[1], s[2], s[3], s[4])
}

/// `(batch, channels, flattened spatial)` of a `[N, C, spatial...]` tensor.
pub(crate) fn norm_dims<S: Scalar>(v: &ArrayD<S>) -> (usize, usize, usize) {
    assert!(v.ndim() >= 3, "expected [N, C, spatial...], got {}-d", v.ndim());
    (v.shape()[0], v.shape()[1], v.shape()[2..].iter().product())
}
