//! Minimal reverse-mode automatic differentiation tape over dense f64 arrays.
//!
//! Each forward pass records nodes on a fresh `Tape`; `backward` sweeps the
//! nodes in reverse and accumulates gradients into the leaves. Primitives are
//! the ones the denoiser and its training losses need: matmul, elementwise
//! arithmetic, layer-norm, softmax, GELU, gather, slicing/concatenation,
//! reductions, and two kinematic ops (joint positions, object points) whose
//! vector-Jacobian products live in `kinematics`.
//!
//! Parameter arrays are shared into the tape as `Arc` leaves, so recording a
//! pass never copies weights.

use std::sync::Arc;

use ndarray::{Array1, Array2, ArrayD, ArrayViewD, Axis, Ix2, IxDyn};

use crate::kinematics::{self, Skeleton, FRAME_FEATURES};

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub usize);

type BackwardFn =
    Box<dyn Fn(&ArrayD<f64>, &ArrayD<f64>, &[ArrayViewD<'_, f64>]) -> Vec<ArrayD<f64>> + Send>;

struct Node {
    value: Arc<ArrayD<f64>>,
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn as2(v: &ArrayD<f64>) -> ndarray::ArrayView2<'_, f64> {
    v.view().into_dimensionality::<Ix2>().expect("2d value")
}

fn view2<'a>(v: &ArrayViewD<'a, f64>) -> ndarray::ArrayView2<'a, f64> {
    v.clone().into_dimensionality::<Ix2>().expect("2d value")
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &ArrayD<f64> {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: ArrayD<f64>, parents: Vec<usize>, backward: BackwardFn) -> Var {
        self.nodes.push(Node {
            value: Arc::new(value),
            parents,
            backward: Some(backward),
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf holding a shared array (typically a parameter tensor).
    pub fn leaf(&mut self, value: Arc<ArrayD<f64>>) -> Var {
        self.nodes.push(Node {
            value,
            parents: Vec::new(),
            backward: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf from an owned 2d array (inputs, constants).
    pub fn input2(&mut self, value: Array2<f64>) -> Var {
        self.leaf(Arc::new(value.into_dyn()))
    }

    pub fn input1(&mut self, value: Array1<f64>) -> Var {
        self.leaf(Arc::new(value.into_dyn()))
    }

    /// `a[m,k] . b[k,n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = as2(self.value(a)).dot(&as2(self.value(b)));
        self.push(
            out.into_dyn(),
            vec![a.0, b.0],
            Box::new(|g, _out, parents| {
                let g2 = as2(g);
                let a = view2(&parents[0]);
                let b = view2(&parents[1]);
                vec![g2.dot(&b.t()).into_dyn(), a.t().dot(&g2).into_dyn()]
            }),
        )
    }

    /// `a[m,k] . b[n,k]^T` (linear layers store weights as [out, in]).
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let out = as2(self.value(a)).dot(&as2(self.value(b)).t());
        self.push(
            out.into_dyn(),
            vec![a.0, b.0],
            Box::new(|g, _out, parents| {
                let g2 = as2(g);
                let a = view2(&parents[0]);
                let b = view2(&parents[1]);
                vec![g2.dot(&b).into_dyn(), g2.t().dot(&a).into_dyn()]
            }),
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a) + self.value(b);
        self.push(
            out,
            vec![a.0, b.0],
            Box::new(|g, _, _| vec![g.clone(), g.clone()]),
        )
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a) - self.value(b);
        self.push(
            out,
            vec![a.0, b.0],
            Box::new(|g, _, _| vec![g.clone(), g.mapv(|v| -v)]),
        )
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a) * self.value(b);
        self.push(
            out,
            vec![a.0, b.0],
            Box::new(|g, _, parents| {
                vec![(g * &parents[1]).into_dyn(), (g * &parents[0]).into_dyn()]
            }),
        )
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).mapv(|v| v * c);
        self.push(
            out,
            vec![a.0],
            Box::new(move |g, _, _| vec![g.mapv(|v| v * c)]),
        )
    }

    /// Elementwise add of a constant array (no gradient into the constant).
    pub fn add_const(&mut self, a: Var, c: &ArrayD<f64>) -> Var {
        let out = self.value(a) + c;
        self.push(out, vec![a.0], Box::new(|g, _, _| vec![g.clone()]))
    }

    /// Elementwise multiply by a constant array.
    pub fn mul_const(&mut self, a: Var, c: &ArrayD<f64>) -> Var {
        let out = self.value(a) * c;
        let cc = c.clone();
        self.push(out, vec![a.0], Box::new(move |g, _, _| vec![g * &cc]))
    }

    /// `x[m,n] + b[n]` broadcast over rows.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Var {
        let xv = as2(self.value(x));
        let bv = self
            .value(b)
            .view()
            .into_dimensionality::<ndarray::Ix1>()
            .unwrap()
            .into_owned();
        let out = &xv + &bv;
        self.push(
            out.into_dyn(),
            vec![x.0, b.0],
            Box::new(|g, _, _| {
                let g2 = as2(g);
                vec![g.clone(), g2.sum_axis(Axis(0)).into_dyn()]
            }),
        )
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        fn gelu_val(x: f64) -> f64 {
            const K: f64 = 0.7978845608028654; // sqrt(2/pi)
            0.5 * x * (1.0 + (K * (x + 0.044715 * x * x * x)).tanh())
        }
        let out = self.value(a).mapv(gelu_val);
        self.push(
            out,
            vec![a.0],
            Box::new(|g, _, parents| {
                const K: f64 = 0.7978845608028654;
                let x = &parents[0];
                let dx = x.mapv(|x| {
                    let u = K * (x + 0.044715 * x * x * x);
                    let t = u.tanh();
                    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * K * (1.0 + 3.0 * 0.044715 * x * x)
                });
                vec![g * &dx]
            }),
        )
    }

    /// Per-row layer normalization with learned gain and shift.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        const EPS: f64 = 1e-5;
        let xv = as2(self.value(x)).into_owned();
        let gv = self.value(gamma).clone();
        let bv = self.value(beta).clone();
        let n = xv.ncols() as f64;
        let mut out = Array2::<f64>::zeros(xv.raw_dim());
        for (mut orow, xrow) in out.outer_iter_mut().zip(xv.outer_iter()) {
            let mean = xrow.mean().unwrap();
            let var = xrow.mapv(|v| (v - mean) * (v - mean)).sum() / n;
            let inv = 1.0 / (var + EPS).sqrt();
            for (o, (&xi, (&g, &b))) in orow
                .iter_mut()
                .zip(xrow.iter().zip(gv.iter().zip(bv.iter())))
            {
                *o = (xi - mean) * inv * g + b;
            }
        }
        self.push(
            out.into_dyn(),
            vec![x.0, gamma.0, beta.0],
            Box::new(|g, _, parents| {
                let x = view2(&parents[0]);
                let gamma = &parents[1];
                let g2 = as2(g);
                let n = x.ncols() as f64;
                let mut dx = Array2::<f64>::zeros((x.nrows(), x.ncols()));
                let mut dgamma = Array1::<f64>::zeros(x.ncols());
                let mut dbeta = Array1::<f64>::zeros(x.ncols());
                for r in 0..x.nrows() {
                    let xrow = x.row(r);
                    let grow = g2.row(r);
                    let mean = xrow.mean().unwrap();
                    let var = xrow.mapv(|v| (v - mean) * (v - mean)).sum() / n;
                    let inv = 1.0 / (var + EPS).sqrt();
                    let xhat: Array1<f64> = xrow.mapv(|v| (v - mean) * inv);
                    let dxhat: Array1<f64> = grow
                        .iter()
                        .zip(gamma.iter())
                        .map(|(&gi, &ga)| gi * ga)
                        .collect();
                    let m1 = dxhat.mean().unwrap();
                    let m2 = dxhat
                        .iter()
                        .zip(xhat.iter())
                        .map(|(&a, &b)| a * b)
                        .sum::<f64>()
                        / n;
                    for c in 0..x.ncols() {
                        dx[(r, c)] = inv * (dxhat[c] - m1 - xhat[c] * m2);
                        dgamma[c] += grow[c] * xhat[c];
                        dbeta[c] += grow[c];
                    }
                }
                vec![dx.into_dyn(), dgamma.into_dyn(), dbeta.into_dyn()]
            }),
        )
    }

    /// Softmax over the last axis of a 2d array.
    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let xv = as2(self.value(x));
        let mut out = xv.into_owned();
        for mut row in out.outer_iter_mut() {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            row.mapv_inplace(|v| (v - max).exp());
            let sum = row.sum();
            row.mapv_inplace(|v| v / sum);
        }
        self.push(
            out.into_dyn(),
            vec![x.0],
            Box::new(|g, out, _| {
                let y = as2(out);
                let g2 = as2(g);
                let mut dx = Array2::<f64>::zeros((y.nrows(), y.ncols()));
                for r in 0..y.nrows() {
                    let dot = g2
                        .row(r)
                        .iter()
                        .zip(y.row(r).iter())
                        .map(|(&a, &b)| a * b)
                        .sum::<f64>();
                    for c in 0..y.ncols() {
                        dx[(r, c)] = y[(r, c)] * (g2[(r, c)] - dot);
                    }
                }
                vec![dx.into_dyn()]
            }),
        )
    }

    /// Columns [start, start+len) of a 2d array.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let out = as2(self.value(x))
            .slice(ndarray::s![.., start..start + len])
            .into_owned();
        self.push(
            out.into_dyn(),
            vec![x.0],
            Box::new(move |g, _, parents| {
                let x = view2(&parents[0]);
                let mut dx = Array2::<f64>::zeros((x.nrows(), x.ncols()));
                dx.slice_mut(ndarray::s![.., start..start + len])
                    .assign(&as2(g));
                vec![dx.into_dyn()]
            }),
        )
    }

    /// Rows [start, start+len) of a 2d array.
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Var {
        let out = as2(self.value(x))
            .slice(ndarray::s![start..start + len, ..])
            .into_owned();
        self.push(
            out.into_dyn(),
            vec![x.0],
            Box::new(move |g, _, parents| {
                let x = view2(&parents[0]);
                let mut dx = Array2::<f64>::zeros((x.nrows(), x.ncols()));
                dx.slice_mut(ndarray::s![start..start + len, ..])
                    .assign(&as2(g));
                vec![dx.into_dyn()]
            }),
        )
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|v| as2(self.value(*v))).collect();
        let out = ndarray::concatenate(Axis(1), &views).expect("column concat");
        let widths: Vec<usize> = views.iter().map(|v| v.ncols()).collect();
        self.push(
            out.into_dyn(),
            parts.iter().map(|v| v.0).collect(),
            Box::new(move |g, _, _| {
                let g2 = as2(g);
                let mut out = Vec::new();
                let mut off = 0;
                for &w in &widths {
                    out.push(
                        g2.slice(ndarray::s![.., off..off + w])
                            .into_owned()
                            .into_dyn(),
                    );
                    off += w;
                }
                out
            }),
        )
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|v| as2(self.value(*v))).collect();
        let out = ndarray::concatenate(Axis(0), &views).expect("row concat");
        let heights: Vec<usize> = views.iter().map(|v| v.nrows()).collect();
        self.push(
            out.into_dyn(),
            parts.iter().map(|v| v.0).collect(),
            Box::new(move |g, _, _| {
                let g2 = as2(g);
                let mut out = Vec::new();
                let mut off = 0;
                for &h in &heights {
                    out.push(
                        g2.slice(ndarray::s![off..off + h, ..])
                            .into_owned()
                            .into_dyn(),
                    );
                    off += h;
                }
                out
            }),
        )
    }

    /// Rows of a table selected by index, with scatter-add backward.
    pub fn gather_rows(&mut self, table: Var, indices: Vec<usize>) -> Var {
        let t = as2(self.value(table));
        let mut out = Array2::<f64>::zeros((indices.len(), t.ncols()));
        for (r, &i) in indices.iter().enumerate() {
            out.row_mut(r).assign(&t.row(i));
        }
        self.push(
            out.into_dyn(),
            vec![table.0],
            Box::new(move |g, _, parents| {
                let t = view2(&parents[0]);
                let g2 = as2(g);
                let mut dt = Array2::<f64>::zeros((t.nrows(), t.ncols()));
                for (r, &i) in indices.iter().enumerate() {
                    let mut row = dt.row_mut(i);
                    row += &g2.row(r);
                }
                vec![dt.into_dyn()]
            }),
        )
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(
            ndarray::arr1(&[s]).into_dyn(),
            vec![x.0],
            Box::new(|g, _, parents| {
                let gv = g[[0]];
                vec![ArrayD::from_elem(parents[0].raw_dim(), gv)]
            }),
        )
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.value(x).len() as f64;
        let s = self.value(x).sum() / n;
        self.push(
            ndarray::arr1(&[s]).into_dyn(),
            vec![x.0],
            Box::new(move |g, _, parents| {
                let gv = g[[0]] / n;
                vec![ArrayD::from_elem(parents[0].raw_dim(), gv)]
            }),
        )
    }

    /// Mean over rows of a 2d array, keeping a [1, n] shape.
    pub fn mean_rows(&mut self, x: Var) -> Var {
        let xv = as2(self.value(x));
        let m = xv.nrows() as f64;
        let out = xv.mean_axis(Axis(0)).unwrap().insert_axis(Axis(0));
        self.push(
            out.into_dyn(),
            vec![x.0],
            Box::new(move |g, _, parents| {
                let x = view2(&parents[0]);
                let g2 = as2(g);
                let mut dx = Array2::<f64>::zeros((x.nrows(), x.ncols()));
                for r in 0..x.nrows() {
                    for c in 0..x.ncols() {
                        dx[(r, c)] = g2[(0, c)] / m;
                    }
                }
                vec![dx.into_dyn()]
            }),
        )
    }

    /// Mean squared error between two same-shape arrays, as a scalar node.
    pub fn mse(&mut self, a: Var, b: Var) -> Var {
        let d = self.sub(a, b);
        let sq = self.mul(d, d);
        self.mean_all(sq)
    }

    /// Joint world positions for selected joints, rows = frames. Input is a
    /// [W, FRAME_FEATURES] array in world units; output is [W, 3*sel.len()].
    pub fn fk_positions(&mut self, x: Var, skel: &'static Skeleton, sel: Vec<usize>) -> Var {
        let xv = as2(self.value(x));
        assert_eq!(xv.ncols(), FRAME_FEATURES);
        let w = xv.nrows();
        let mut out = Array2::<f64>::zeros((w, 3 * sel.len()));
        for f in 0..w {
            let row: Vec<f64> = xv.row(f).to_vec();
            let cache = kinematics::fk_forward_cached(&row, skel);
            for (k, &j) in sel.iter().enumerate() {
                out[(f, 3 * k)] = cache.pos[j][0];
                out[(f, 3 * k + 1)] = cache.pos[j][1];
                out[(f, 3 * k + 2)] = cache.pos[j][2];
            }
        }
        let sel2 = sel.clone();
        self.push(
            out.into_dyn(),
            vec![x.0],
            Box::new(move |g, _, parents| {
                let x = view2(&parents[0]);
                let g2 = as2(g);
                let mut dx = Array2::<f64>::zeros((x.nrows(), x.ncols()));
                for f in 0..x.nrows() {
                    let row: Vec<f64> = x.row(f).to_vec();
                    let cache = kinematics::fk_forward_cached(&row, skel);
                    let mut dpos = vec![[0.0; 3]; kinematics::JOINT_COUNT];
                    for (k, &j) in sel2.iter().enumerate() {
                        dpos[j][0] += g2[(f, 3 * k)];
                        dpos[j][1] += g2[(f, 3 * k + 1)];
                        dpos[j][2] += g2[(f, 3 * k + 2)];
                    }
                    let mut drow = vec![0.0; FRAME_FEATURES];
                    kinematics::fk_backward(&cache, skel, &dpos, &mut drow);
                    for c in 0..FRAME_FEATURES {
                        dx[(f, c)] += drow[c];
                    }
                }
                vec![dx.into_dyn()]
            }),
        )
    }

    /// World positions of object-local points under the per-frame object pose.
    /// Input [W, FRAME_FEATURES]; output [W, 3*points.len()].
    pub fn object_points(&mut self, x: Var, points: Vec<[f64; 3]>) -> Var {
        let xv = as2(self.value(x));
        assert_eq!(xv.ncols(), FRAME_FEATURES);
        let w = xv.nrows();
        let mut out = Array2::<f64>::zeros((w, 3 * points.len()));
        for f in 0..w {
            let row: Vec<f64> = xv.row(f).to_vec();
            let (rot, t, _) = kinematics::object_pose_cached(&row);
            for (k, p) in points.iter().enumerate() {
                let v = rot * nalgebra::Vector3::new(p[0], p[1], p[2]);
                out[(f, 3 * k)] = v[0] + t[0];
                out[(f, 3 * k + 1)] = v[1] + t[1];
                out[(f, 3 * k + 2)] = v[2] + t[2];
            }
        }
        let pts = points.clone();
        self.push(
            out.into_dyn(),
            vec![x.0],
            Box::new(move |g, _, parents| {
                let x = view2(&parents[0]);
                let g2 = as2(g);
                let mut dx = Array2::<f64>::zeros((x.nrows(), x.ncols()));
                for f in 0..x.nrows() {
                    let row: Vec<f64> = x.row(f).to_vec();
                    let (_, _, cache) = kinematics::object_pose_cached(&row);
                    let dworld: Vec<[f64; 3]> = (0..pts.len())
                        .map(|k| [g2[(f, 3 * k)], g2[(f, 3 * k + 1)], g2[(f, 3 * k + 2)]])
                        .collect();
                    let mut drow = vec![0.0; FRAME_FEATURES];
                    kinematics::object_pose_backward(&cache, &pts, &dworld, &mut drow);
                    for c in 0..FRAME_FEATURES {
                        dx[(f, c)] += drow[c];
                    }
                }
                vec![dx.into_dyn()]
            }),
        )
    }

    /// Reverse sweep from a scalar node. Returns per-node gradients for leaves
    /// (interior gradients are dropped once consumed).
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.nodes[loss.0].value.len(), 1, "loss must be scalar");
        let mut grads: Vec<Option<ArrayD<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(ArrayD::from_elem(IxDyn(&[1]), 1.0));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].clone() else { continue };
            let node = &self.nodes[i];
            if let Some(back) = &node.backward {
                let parent_vals: Vec<ArrayViewD<'_, f64>> = node
                    .parents
                    .iter()
                    .map(|&p| self.nodes[p].value.view())
                    .collect();
                let pgrads = back(&g, &node.value, &parent_vals);
                debug_assert_eq!(pgrads.len(), node.parents.len());
                for (&p, pg) in node.parents.iter().zip(pgrads) {
                    match &mut grads[p] {
                        Some(acc) => *acc += &pg,
                        slot => *slot = Some(pg),
                    }
                }
                grads[i] = None; // interior grad no longer needed
            }
        }
        Gradients { grads }
    }
}

/// Gradients produced by a backward sweep, queryable per leaf.
pub struct Gradients {
    grads: Vec<Option<ArrayD<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&ArrayD<f64>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<ArrayD<f64>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

/// One-hot encoding of integer labels (a constant input, not differentiable).
pub fn one_hot(labels: &[usize], classes: usize) -> Array2<f64> {
    let mut out = Array2::<f64>::zeros((labels.len(), classes));
    for (r, &l) in labels.iter().enumerate() {
        assert!(l < classes, "label {l} out of range {classes}");
        out[(r, l)] = 1.0;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;
    use rand::Rng;

    /// Directional finite-difference check: builds the loss twice per probe
    /// direction and compares against the recorded gradient.
    fn fd_check<F>(shapes: &[Vec<usize>], build: F, probes: usize, tol: f64)
    where
        F: Fn(&mut Tape, &[Var]) -> Var,
    {
        let mut rng = crate::util::rng_for(50, &[shapes.len() as u64, probes as u64]);
        let base: Vec<ArrayD<f64>> = shapes
            .iter()
            .map(|s| ArrayD::from_shape_fn(IxDyn(s), |_| rng.gen_range(-1.0..1.0)))
            .collect();
        let mut tape = Tape::new();
        let vars: Vec<Var> = base
            .iter()
            .map(|a| tape.leaf(Arc::new(a.clone())))
            .collect();
        let loss = build(&mut tape, &vars);
        let grads = tape.backward(loss);
        let eval = |points: &[ArrayD<f64>]| -> f64 {
            let mut t = Tape::new();
            let vs: Vec<Var> = points.iter().map(|a| t.leaf(Arc::new(a.clone()))).collect();
            let l = build(&mut t, &vs);
            t.value(l)[[0]]
        };
        for _ in 0..probes {
            let dirs: Vec<ArrayD<f64>> = shapes
                .iter()
                .map(|s| ArrayD::from_shape_fn(IxDyn(s), |_| rng.gen_range(-1.0..1.0)))
                .collect();
            let eps = 1e-5;
            let plus: Vec<ArrayD<f64>> = base
                .iter()
                .zip(&dirs)
                .map(|(b, d)| b + &d.mapv(|v| v * eps))
                .collect();
            let minus: Vec<ArrayD<f64>> = base
                .iter()
                .zip(&dirs)
                .map(|(b, d)| b - &d.mapv(|v| v * eps))
                .collect();
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * eps);
            let mut analytic = 0.0;
            for (v, d) in vars.iter().zip(&dirs) {
                if let Some(g) = grads.get(*v) {
                    analytic += (g * d).sum();
                }
            }
            let denom = fd.abs().max(analytic.abs()).max(1e-8);
            assert!(
                (fd - analytic).abs() / denom < tol,
                "fd={fd} analytic={analytic}"
            );
        }
    }

    #[test]
    fn fd_matmul() {
        fd_check(
            &[vec![3, 4], vec![4, 5]],
            |t, v| {
                let m = t.matmul(v[0], v[1]);
                t.mean_all(m)
            },
            20,
            1e-3,
        );
    }

    #[test]
    fn fd_matmul_nt() {
        fd_check(
            &[vec![3, 4], vec![5, 4]],
            |t, v| {
                let m = t.matmul_nt(v[0], v[1]);
                t.sum_all(m)
            },
            20,
            1e-3,
        );
    }

    #[test]
    fn fd_add_sub_mul_scale() {
        fd_check(
            &[vec![4, 3], vec![4, 3]],
            |t, v| {
                let a = t.add(v[0], v[1]);
                let s = t.sub(a, v[1]);
                let m = t.mul(s, v[0]);
                let sc = t.scale(m, 1.7);
                t.mean_all(sc)
            },
            20,
            1e-3,
        );
    }

    #[test]
    fn fd_add_bias() {
        fd_check(
            &[vec![5, 3], vec![3]],
            |t, v| {
                let o = t.add_bias(v[0], v[1]);
                let sq = t.mul(o, o);
                t.mean_all(sq)
            },
            20,
            1e-3,
        );
    }

    #[test]
    fn fd_gelu() {
        fd_check(
            &[vec![4, 4]],
            |t, v| {
                let g = t.gelu(v[0]);
                t.sum_all(g)
            },
            20,
            1e-3,
        );
    }

    #[test]
    fn fd_layer_norm() {
        fd_check(
            &[vec![4, 6], vec![6], vec![6]],
            |t, v| {
                let ln = t.layer_norm(v[0], v[1], v[2]);
                let sq = t.mul(ln, ln);
                t.mean_all(sq)
            },
            20,
            1e-3,
        );
    }

    #[test]
    fn fd_softmax() {
        fd_check(
            &[vec![3, 5], vec![3, 5]],
            |t, v| {
                let s = t.softmax_rows(v[0]);
                let w = t.mul(s, v[1]);
                t.sum_all(w)
            },
            20,
            1e-3,
        );
    }

    #[test]
    fn fd_slicing_and_concat() {
        fd_check(
            &[vec![4, 6], vec![4, 2]],
            |t, v| {
                let a = t.slice_cols(v[0], 1, 3);
                let b = t.slice_rows(v[0], 0, 2);
                let c = t.concat_cols(&[a, v[1]]);
                let d = t.concat_rows(&[b, b]);
                let s1 = t.sum_all(c);
                let s2 = t.sum_all(d);
                let sq = t.mul(s1, s2);
                t.sum_all(sq)
            },
            20,
            1e-3,
        );
    }

    #[test]
    fn fd_gather() {
        fd_check(
            &[vec![6, 4]],
            |t, v| {
                let g = t.gather_rows(v[0], vec![0, 2, 2, 5]);
                let sq = t.mul(g, g);
                t.mean_all(sq)
            },
            20,
            1e-3,
        );
    }

    #[test]
    fn fd_reductions_and_mse() {
        fd_check(
            &[vec![3, 7], vec![3, 7]],
            |t, v| {
                let m = t.mean_rows(v[0]);
                let s = t.sum_all(m);
                let e = t.mse(v[0], v[1]);
                let c = t.mul(s, e);
                t.sum_all(c)
            },
            20,
            1e-3,
        );
    }

    #[test]
    fn fd_fk_positions() {
        let skel = Skeleton::default_human();
        fd_check(
            &[vec![2, FRAME_FEATURES]],
            move |t, v| {
                let p = t.fk_positions(v[0], skel, vec![9, 13, 17, 21]);
                let sq = t.mul(p, p);
                t.mean_all(sq)
            },
            20,
            1e-3,
        );
    }

    #[test]
    fn fd_object_points() {
        let pts = vec![[0.1, 0.2, -0.1], [-0.2, 0.0, 0.3], [0.05, -0.15, 0.2]];
        fd_check(
            &[vec![2, FRAME_FEATURES]],
            move |t, v| {
                let p = t.object_points(v[0], pts.clone());
                let sq = t.mul(p, p);
                t.mean_all(sq)
            },
            20,
            1e-3,
        );
    }

    #[test]
    fn one_hot_forward() {
        let oh = one_hot(&[2, 0, 1], 3);
        assert_eq!(
            oh,
            arr2(&[[0.0, 0.0, 1.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])
        );
    }

    #[test]
    fn backward_accumulates_shared_parents() {
        // loss = mean(x*x) with x used twice: grad = 2x/n
        let mut t = Tape::new();
        let x = t.input2(arr2(&[[1.0, 2.0], [3.0, 4.0]]));
        let sq = t.mul(x, x);
        let loss = t.mean_all(sq);
        let grads = t.backward(loss);
        let g = grads.get(x).unwrap();
        let expect = arr2(&[[0.5, 1.0], [1.5, 2.0]]).into_dyn();
        assert!(g
            .iter()
            .zip(expect.iter())
            .all(|(a, b)| (a - b).abs() < 1e-12));
    }

    #[test]
    fn forward_is_deterministic() {
        let run = || {
            let mut t = Tape::new();
            let x = t.input2(arr2(&[[0.3, -0.4], [0.1, 0.9]]));
            let w = t.input2(arr2(&[[0.5, 0.2], [-0.3, 0.8]]));
            let h = t.matmul(x, w);
            let g = t.gelu(h);
            let l = t.mean_all(g);
            t.value(l)[[0]]
        };
        assert_eq!(run().to_bits(), run().to_bits());
    }
}

