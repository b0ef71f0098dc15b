//! Dense float tensors with reverse-mode automatic differentiation.
//!
//! The engine is generic over the element type: `f32` is the training and
//! inference path, `f64` exists as a shadow path for tight gradient checks.
//! Tensors are immutable values; recorded operations form an acyclic graph
//! that [`Tensor::backward`] walks in reverse creation order, which makes
//! gradients bit-reproducible across runs.

use std::cell::{Cell, RefCell};
use std::collections::HashSet;
use std::fmt;
use std::rc::Rc;

use num_traits::Float;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

pub mod gradcheck;
pub mod nn;
pub mod optim;

/// Scalar types the engine can run on.
pub trait Element:
    Float + num_traits::NumCast + std::iter::Sum + fmt::Debug + fmt::Display + Send + Sync + 'static
{
    fn sample_standard_normal<R: Rng + ?Sized>(rng: &mut R) -> Self;
}

impl Element for f32 {
    fn sample_standard_normal<R: Rng + ?Sized>(rng: &mut R) -> Self {
        StandardNormal.sample(rng)
    }
}

impl Element for f64 {
    fn sample_standard_normal<R: Rng + ?Sized>(rng: &mut R) -> Self {
        StandardNormal.sample(rng)
    }
}

/// Cast an `f64` constant into the element type.
pub fn elem<T: Element>(x: f64) -> T {
    T::from(x).expect("constant representable in element type")
}

thread_local! {
    static NEXT_ID: Cell<u64> = const { Cell::new(0) };
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

fn next_id() -> u64 {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

/// Run `f` without recording the autodiff graph (sampling/evaluation path).
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    struct Restore(bool);
    impl Drop for Restore {
        fn drop(&mut self) {
            let prev = self.0;
            GRAD_ENABLED.with(|c| c.set(prev));
        }
    }
    let prev = GRAD_ENABLED.with(|c| c.get());
    let _restore = Restore(prev);
    GRAD_ENABLED.with(|c| c.set(false));
    f()
}

fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|c| c.get())
}

/// Gradients for each parent, aligned by index. An empty vector in a slot
/// means the op skipped that parent (it does not track gradients).
type BackwardFn<T> = Box<dyn Fn(&[T]) -> Vec<Vec<T>>>;

struct Inner<T: Element> {
    id: u64,
    shape: Vec<usize>,
    data: Vec<T>,
    tracks_grad: bool,
    grad: RefCell<Option<Vec<T>>>,
    parents: Vec<Tensor<T>>,
    backward: Option<BackwardFn<T>>,
}

/// An n-dimensional row-major float array, optionally part of a backward graph.
pub struct Tensor<T: Element = f32> {
    inner: Rc<Inner<T>>,
}

impl<T: Element> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor {
            inner: Rc::clone(&self.inner),
        }
    }
}

impl<T: Element> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.inner.shape)
            .field("tracks_grad", &self.inner.tracks_grad)
            .finish()
    }
}

impl<T: Element> Tensor<T> {
    fn leaf(shape: Vec<usize>, data: Vec<T>, tracks_grad: bool) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Shape(format!(
                "shape {:?} implies {} elements, data has {}",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Tensor {
            inner: Rc::new(Inner {
                id: next_id(),
                shape,
                data,
                tracks_grad,
                grad: RefCell::new(None),
                parents: Vec::new(),
                backward: None,
            }),
        })
    }

    /// A constant tensor that does not participate in autodiff.
    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        Self::leaf(shape.to_vec(), data, false)
    }

    /// A leaf parameter whose gradient is populated by [`Tensor::backward`].
    pub fn param(shape: &[usize], data: Vec<T>) -> Result<Self> {
        Self::leaf(shape.to_vec(), data, true)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Self::leaf(shape.to_vec(), vec![T::zero(); numel], false).expect("consistent")
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let numel = shape.iter().product();
        Self::leaf(shape.to_vec(), vec![value; numel], false).expect("consistent")
    }

    pub fn scalar_tensor(value: T) -> Self {
        Self::full(&[1], value)
    }

    /// Standard-normal tensor drawn from `rng`.
    pub fn randn<R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Self {
        let numel: usize = shape.iter().product();
        let data = (0..numel).map(|_| T::sample_standard_normal(rng)).collect();
        Self::leaf(shape.to_vec(), data, false).expect("consistent")
    }

    /// Internal constructor for recorded operations.
    pub(crate) fn from_op(
        shape: Vec<usize>,
        data: Vec<T>,
        parents: Vec<Tensor<T>>,
        backward: impl Fn(&[T]) -> Vec<Vec<T>> + 'static,
    ) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        let record = grad_enabled() && parents.iter().any(|p| p.tracks_grad());
        if record {
            Tensor {
                inner: Rc::new(Inner {
                    id: next_id(),
                    shape,
                    data,
                    tracks_grad: true,
                    grad: RefCell::new(None),
                    parents,
                    backward: Some(Box::new(backward)),
                }),
            }
        } else {
            Self::leaf(shape, data, false).expect("consistent")
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn ndim(&self) -> usize {
        self.inner.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.inner.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.inner.data
    }

    /// Value of a one-element tensor.
    ///
    /// Panics when the tensor is not scalar; that is a programming error,
    /// not an input error.
    pub fn item(&self) -> T {
        assert_eq!(self.numel(), 1, "item() requires a one-element tensor");
        self.inner.data[0]
    }

    pub fn tracks_grad(&self) -> bool {
        self.inner.tracks_grad
    }

    /// True for leaf parameters created with [`Tensor::param`].
    pub fn is_param(&self) -> bool {
        self.inner.tracks_grad && self.inner.backward.is_none()
    }

    pub fn grad(&self) -> Option<Vec<T>> {
        self.inner.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = Some(vec![T::zero(); self.numel()]);
    }

    pub(crate) fn scale_grad_in_place(&self, factor: T) {
        if let Some(g) = self.inner.grad.borrow_mut().as_mut() {
            for v in g.iter_mut() {
                *v = *v * factor;
            }
        }
    }

    /// A detached copy of this tensor's values (constant, no graph).
    pub fn detach(&self) -> Tensor<T> {
        Tensor::from_vec(&self.inner.shape, self.inner.data.clone()).expect("consistent")
    }

    fn accumulate_grad(&self, contrib: &[T]) {
        let mut slot = self.inner.grad.borrow_mut();
        let g = slot.get_or_insert_with(|| vec![T::zero(); self.numel()]);
        for (a, b) in g.iter_mut().zip(contrib) {
            *a = *a + *b;
        }
    }

    /// Reverse-mode sweep from a scalar loss.
    ///
    /// Gradients of every node reachable from `self` are reset and then
    /// repopulated, so repeated calls on the same graph are bit-identical.
    /// Leaves that are not part of this graph are left untouched.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::Usage(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape()
            )));
        }
        // Collect the reachable subgraph; creation ids give a topological order.
        let mut seen: HashSet<u64> = HashSet::new();
        let mut nodes: Vec<Tensor<T>> = Vec::new();
        let mut stack = vec![self.clone()];
        while let Some(t) = stack.pop() {
            if !seen.insert(t.inner.id) {
                continue;
            }
            for p in &t.inner.parents {
                if p.tracks_grad() {
                    stack.push(p.clone());
                }
            }
            nodes.push(t);
        }
        nodes.sort_by(|a, b| b.inner.id.cmp(&a.inner.id));

        for n in &nodes {
            n.zero_grad();
        }
        self.inner.grad.borrow_mut().replace(vec![T::one()]);

        for node in &nodes {
            let Some(back) = node.inner.backward.as_ref() else {
                continue;
            };
            let grad = node
                .inner
                .grad
                .borrow()
                .clone()
                .expect("reachable node grad initialized");
            let contribs = back(&grad);
            debug_assert_eq!(contribs.len(), node.inner.parents.len());
            for (parent, contrib) in node.inner.parents.iter().zip(&contribs) {
                if contrib.is_empty() {
                    continue;
                }
                debug_assert_eq!(contrib.len(), parent.numel());
                parent.accumulate_grad(contrib);
            }
        }
        Ok(())
    }

    fn check_same_shape(&self, other: &Tensor<T>, op: &str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::Shape(format!(
                "{op}: shapes {:?} and {:?} differ",
                self.shape(),
                other.shape()
            )));
        }
        Ok(())
    }

    pub fn add(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_same_shape(other, "add")?;
        let data = self
            .data()
            .iter()
            .zip(other.data())
            .map(|(a, b)| *a + *b)
            .collect();
        let (na, nb) = (self.tracks_grad(), other.tracks_grad());
        Ok(Tensor::from_op(
            self.inner.shape.clone(),
            data,
            vec![self.clone(), other.clone()],
            move |g| {
                vec![
                    if na { g.to_vec() } else { Vec::new() },
                    if nb { g.to_vec() } else { Vec::new() },
                ]
            },
        ))
    }

    pub fn sub(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_same_shape(other, "sub")?;
        let data = self
            .data()
            .iter()
            .zip(other.data())
            .map(|(a, b)| *a - *b)
            .collect();
        let (na, nb) = (self.tracks_grad(), other.tracks_grad());
        Ok(Tensor::from_op(
            self.inner.shape.clone(),
            data,
            vec![self.clone(), other.clone()],
            move |g| {
                vec![
                    if na { g.to_vec() } else { Vec::new() },
                    if nb {
                        g.iter().map(|v| -*v).collect()
                    } else {
                        Vec::new()
                    },
                ]
            },
        ))
    }

    pub fn mul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_same_shape(other, "mul")?;
        let data = self
            .data()
            .iter()
            .zip(other.data())
            .map(|(a, b)| *a * *b)
            .collect();
        let (lhs, rhs) = (self.clone(), other.clone());
        let (na, nb) = (self.tracks_grad(), other.tracks_grad());
        Ok(Tensor::from_op(
            self.inner.shape.clone(),
            data,
            vec![self.clone(), other.clone()],
            move |g| {
                vec![
                    if na {
                        g.iter().zip(rhs.data()).map(|(g, b)| *g * *b).collect()
                    } else {
                        Vec::new()
                    },
                    if nb {
                        g.iter().zip(lhs.data()).map(|(g, a)| *g * *a).collect()
                    } else {
                        Vec::new()
                    },
                ]
            },
        ))
    }

    pub fn scale(&self, factor: T) -> Tensor<T> {
        let data = self.data().iter().map(|v| *v * factor).collect();
        let tracked = self.tracks_grad();
        Tensor::from_op(
            self.inner.shape.clone(),
            data,
            vec![self.clone()],
            move |g| {
                vec![if tracked {
                    g.iter().map(|v| *v * factor).collect()
                } else {
                    Vec::new()
                }]
            },
        )
    }

    pub fn neg(&self) -> Tensor<T> {
        self.scale(-T::one())
    }

    pub fn add_scalar(&self, value: T) -> Tensor<T> {
        let data = self.data().iter().map(|v| *v + value).collect();
        let tracked = self.tracks_grad();
        Tensor::from_op(
            self.inner.shape.clone(),
            data,
            vec![self.clone()],
            move |g| vec![if tracked { g.to_vec() } else { Vec::new() }],
        )
    }

    /// Clamp values to `[lo, hi]`; the gradient passes through inside the
    /// closed interval and is zero outside.
    pub fn clamp(&self, lo: T, hi: T) -> Tensor<T> {
        let data = self
            .data()
            .iter()
            .map(|v| {
                if *v < lo {
                    lo
                } else if *v > hi {
                    hi
                } else {
                    *v
                }
            })
            .collect();
        let src = self.clone();
        let tracked = self.tracks_grad();
        Tensor::from_op(
            self.inner.shape.clone(),
            data,
            vec![self.clone()],
            move |g| {
                vec![if tracked {
                    g.iter()
                        .zip(src.data())
                        .map(|(g, x)| if *x >= lo && *x <= hi { *g } else { T::zero() })
                        .collect()
                } else {
                    Vec::new()
                }]
            },
        )
    }

    /// Hard threshold into a constant {0,1} mask (values >= `threshold` map to 1).
    pub fn binarize(&self, threshold: T) -> Tensor<T> {
        let data = self
            .data()
            .iter()
            .map(|v| if *v >= threshold { T::one() } else { T::zero() })
            .collect();
        Tensor::from_vec(&self.inner.shape, data).expect("consistent")
    }

    /// Scale every element of row `n` (the leading axis) by `weights[n]`.
    pub fn mul_batch(&self, weights: &[T]) -> Result<Tensor<T>> {
        let n = *self.shape().first().ok_or_else(|| {
            Error::Shape("mul_batch requires at least one dimension".to_string())
        })?;
        if weights.len() != n {
            return Err(Error::Shape(format!(
                "mul_batch: {} weights for leading dimension {}",
                weights.len(),
                n
            )));
        }
        let row = self.numel() / n;
        let mut data = Vec::with_capacity(self.numel());
        for (i, chunk) in self.data().chunks(row).enumerate() {
            data.extend(chunk.iter().map(|v| *v * weights[i]));
        }
        let w = weights.to_vec();
        let tracked = self.tracks_grad();
        Ok(Tensor::from_op(
            self.inner.shape.clone(),
            data,
            vec![self.clone()],
            move |g| {
                vec![if tracked {
                    let mut out = Vec::with_capacity(g.len());
                    for (i, chunk) in g.chunks(row).enumerate() {
                        out.extend(chunk.iter().map(|v| *v * w[i]));
                    }
                    out
                } else {
                    Vec::new()
                }]
            },
        ))
    }

    /// Multiply every element by a one-element tensor, differentiable in both.
    pub fn scale_by(&self, factor: &Tensor<T>) -> Result<Tensor<T>> {
        if factor.numel() != 1 {
            return Err(Error::Shape(format!(
                "scale_by expects a one-element factor, got shape {:?}",
                factor.shape()
            )));
        }
        let f = factor.item();
        let data = self.data().iter().map(|v| *v * f).collect();
        let src = self.clone();
        let (na, nf) = (self.tracks_grad(), factor.tracks_grad());
        Ok(Tensor::from_op(
            self.inner.shape.clone(),
            data,
            vec![self.clone(), factor.clone()],
            move |g| {
                vec![
                    if na {
                        g.iter().map(|v| *v * f).collect()
                    } else {
                        Vec::new()
                    },
                    if nf {
                        vec![g.iter().zip(src.data()).map(|(g, x)| *g * *x).sum()]
                    } else {
                        Vec::new()
                    },
                ]
            },
        ))
    }

    pub fn sum_all(&self) -> Tensor<T> {
        let total: T = self.data().iter().copied().sum();
        let numel = self.numel();
        let tracked = self.tracks_grad();
        Tensor::from_op(vec![1], vec![total], vec![self.clone()], move |g| {
            vec![if tracked {
                vec![g[0]; numel]
            } else {
                Vec::new()
            }]
        })
    }

    pub fn mean_all(&self) -> Tensor<T> {
        let numel = self.numel();
        let inv = T::one() / elem::<T>(numel as f64);
        let total: T = self.data().iter().copied().sum();
        let tracked = self.tracks_grad();
        Tensor::from_op(vec![1], vec![total * inv], vec![self.clone()], move |g| {
            vec![if tracked {
                vec![g[0] * inv; numel]
            } else {
                Vec::new()
            }]
        })
    }

    /// Sum of squares reduced to a scalar (used for norms and losses).
    pub fn square_sum(&self) -> Tensor<T> {
        let total: T = self.data().iter().map(|v| *v * *v).sum();
        let src = self.clone();
        let tracked = self.tracks_grad();
        Tensor::from_op(vec![1], vec![total], vec![self.clone()], move |g| {
            vec![if tracked {
                let two = elem::<T>(2.0);
                src.data().iter().map(|x| two * *x * g[0]).collect()
            } else {
                Vec::new()
            }]
        })
    }
}
