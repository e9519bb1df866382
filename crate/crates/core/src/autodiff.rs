//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! A [`Tape`] records every operation of one forward pass; [`Tape::backward`]
//! replays it in reverse and accumulates gradients into the grad-tracked
//! leaves. All tensors are two-dimensional (`Array2<f64>`); scalars are 1x1,
//! row vectors 1xD, column vectors Sx1. Tapes are cheap to build and are
//! dropped after each sample, so one tape never outlives a single
//! forward/backward pass.
//!
//! Gradients are only computed along paths that reach a grad-tracked leaf:
//! constants (data, masks, targets) cost nothing at backward time, and matmul
//! against a frozen weight skips the weight-gradient GEMM entirely.

use ndarray::{concatenate, s, Array2, Axis};
use std::cell::RefCell;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

type BackwardFn = Box<dyn Fn(&Array2<f64>, &[&Array2<f64>], &Array2<f64>, &[bool]) -> Vec<Option<Array2<f64>>>>;

struct Node {
    value: Array2<f64>,
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
    needs_grad: bool,
}

/// Records one forward computation for reverse-mode differentiation.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Gradients of one backward pass, indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`, if `v` was grad-tracked.
    pub fn get(&self, v: Var) -> Option<&Array2<f64>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad_scalar(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    /// Current value of a node (cloned out of the tape).
    pub fn value(&self, v: Var) -> Array2<f64> {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let nodes = self.nodes.borrow();
        let d = nodes[v.0].value.dim();
        d
    }

    fn push(&self, value: Array2<f64>, parents: Vec<usize>, backward: Option<BackwardFn>) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        let needs_grad = backward.is_some() && parents.iter().any(|&p| nodes[p].needs_grad);
        nodes.push(Node {
            value,
            parents,
            backward: if needs_grad { backward } else { None },
            needs_grad,
        });
        Var(nodes.len() - 1)
    }

    /// Leaf without gradient tracking (input data, masks, targets).
    pub fn constant(&self, value: Array2<f64>) -> Var {
        self.push(value, vec![], None)
    }

    /// Grad-tracked leaf (trainable parameters, probe inputs).
    pub fn leaf(&self, value: Array2<f64>) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            parents: vec![],
            backward: None,
            needs_grad: true,
        });
        Var(nodes.len() - 1)
    }

    fn with_values<R>(&self, f: impl FnOnce(&[Node]) -> R) -> R {
        f(&self.nodes.borrow())
    }

    // ---- elementwise / broadcast arithmetic ----

    pub fn add(&self, a: Var, b: Var) -> Var {
        let value = self.with_values(|n| {
            assert_eq!(n[a.0].value.dim(), n[b.0].value.dim(), "add: shape mismatch");
            &n[a.0].value + &n[b.0].value
        });
        self.push(
            value,
            vec![a.0, b.0],
            Some(Box::new(|g, _, _, need| {
                vec![
                    need[0].then(|| g.clone()),
                    need[1].then(|| g.clone()),
                ]
            })),
        )
    }

    /// Adds a 1xN row vector to every row of an MxN matrix.
    pub fn add_row(&self, a: Var, row: Var) -> Var {
        let value = self.with_values(|n| {
            let r = &n[row.0].value;
            assert_eq!(r.nrows(), 1, "add_row: rhs must be 1xN");
            assert_eq!(n[a.0].value.ncols(), r.ncols(), "add_row: width mismatch");
            &n[a.0].value + r
        });
        self.push(
            value,
            vec![a.0, row.0],
            Some(Box::new(|g, _, _, need| {
                vec![
                    need[0].then(|| g.clone()),
                    need[1].then(|| g.sum_axis(Axis(0)).insert_axis(Axis(0))),
                ]
            })),
        )
    }

    pub fn scale(&self, a: Var, k: f64) -> Var {
        let value = self.with_values(|n| &n[a.0].value * k);
        self.push(
            value,
            vec![a.0],
            Some(Box::new(move |g, _, _, need| vec![need[0].then(|| g * k)])),
        )
    }

    pub fn matmul(&self, a: Var, b: Var) -> Var {
        let value = self.with_values(|n| {
            assert_eq!(
                n[a.0].value.ncols(),
                n[b.0].value.nrows(),
                "matmul: inner dimension mismatch"
            );
            n[a.0].value.dot(&n[b.0].value)
        });
        self.push(
            value,
            vec![a.0, b.0],
            Some(Box::new(|g, parents, _, need| {
                let (a, b) = (parents[0], parents[1]);
                vec![
                    need[0].then(|| g.dot(&b.t())),
                    need[1].then(|| a.t().dot(g)),
                ]
            })),
        )
    }

    pub fn transpose(&self, a: Var) -> Var {
        let value = self.with_values(|n| n[a.0].value.t().to_owned());
        self.push(
            value,
            vec![a.0],
            Some(Box::new(|g, _, _, need| vec![need[0].then(|| g.t().to_owned())])),
        )
    }

    pub fn sin(&self, a: Var) -> Var {
        let value = self.with_values(|n| n[a.0].value.mapv(f64::sin));
        self.push(
            value,
            vec![a.0],
            Some(Box::new(|g, parents, _, need| {
                vec![need[0].then(|| g * &parents[0].mapv(f64::cos))]
            })),
        )
    }

    pub fn relu(&self, a: Var) -> Var {
        let value = self.with_values(|n| n[a.0].value.mapv(|x| x.max(0.0)));
        self.push(
            value,
            vec![a.0],
            Some(Box::new(|g, parents, _, need| {
                vec![need[0].then(|| g * &parents[0].mapv(|x| if x > 0.0 { 1.0 } else { 0.0 }))]
            })),
        )
    }

    pub fn gelu(&self, a: Var) -> Var {
        let value = self.with_values(|n| n[a.0].value.mapv(gelu_scalar));
        self.push(
            value,
            vec![a.0],
            Some(Box::new(|g, parents, _, need| {
                vec![need[0].then(|| g * &parents[0].mapv(gelu_grad_scalar))]
            })),
        )
    }

    // ---- normalization / attention building blocks ----

    /// Per-row layer normalization with learnable gain and bias (both 1xN).
    pub fn layer_norm(&self, x: Var, gain: Var, bias: Var, eps: f64) -> Var {
        let value = self.with_values(|n| {
            let xv = &n[x.0].value;
            let g = &n[gain.0].value;
            let b = &n[bias.0].value;
            assert_eq!(g.nrows(), 1);
            assert_eq!(b.nrows(), 1);
            let mut out = Array2::zeros(xv.dim());
            for (i, row) in xv.rows().into_iter().enumerate() {
                let mean = row.mean().unwrap();
                let var = row.mapv(|v| (v - mean) * (v - mean)).mean().unwrap();
                let inv = 1.0 / (var + eps).sqrt();
                for (j, &v) in row.iter().enumerate() {
                    out[[i, j]] = (v - mean) * inv * g[[0, j]] + b[[0, j]];
                }
            }
            out
        });
        self.push(
            value,
            vec![x.0, gain.0, bias.0],
            Some(Box::new(move |g_out, parents, _, need| {
                let xv = parents[0];
                let gain = parents[1];
                let n = xv.ncols() as f64;
                let mut gx = need[0].then(|| Array2::zeros(xv.dim()));
                let mut gg = need[1].then(|| Array2::zeros((1, xv.ncols())));
                let mut gb = need[2].then(|| Array2::zeros((1, xv.ncols())));
                for (i, row) in xv.rows().into_iter().enumerate() {
                    let mean = row.mean().unwrap();
                    let var = row.mapv(|v| (v - mean) * (v - mean)).mean().unwrap();
                    let inv = 1.0 / (var + eps).sqrt();
                    let xhat: Vec<f64> = row.iter().map(|&v| (v - mean) * inv).collect();
                    if let Some(gb) = gb.as_mut() {
                        for j in 0..xv.ncols() {
                            gb[[0, j]] += g_out[[i, j]];
                        }
                    }
                    if let Some(gg) = gg.as_mut() {
                        for j in 0..xv.ncols() {
                            gg[[0, j]] += g_out[[i, j]] * xhat[j];
                        }
                    }
                    if let Some(gx) = gx.as_mut() {
                        // dxhat_j = g_out_j * gain_j; dx = inv*(dxhat - mean(dxhat) - xhat*mean(dxhat*xhat))
                        let dxhat: Vec<f64> =
                            (0..xv.ncols()).map(|j| g_out[[i, j]] * gain[[0, j]]).collect();
                        let m1 = dxhat.iter().sum::<f64>() / n;
                        let m2 = dxhat.iter().zip(&xhat).map(|(d, h)| d * h).sum::<f64>() / n;
                        for j in 0..xv.ncols() {
                            gx[[i, j]] = inv * (dxhat[j] - m1 - xhat[j] * m2);
                        }
                    }
                }
                vec![gx, gg, gb]
            })),
        )
    }

    /// Row-wise softmax (numerically stabilized by the row max).
    pub fn softmax_rows(&self, a: Var) -> Var {
        let value = self.with_values(|n| {
            let mut out = n[a.0].value.clone();
            for mut row in out.rows_mut() {
                let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
                row.mapv_inplace(|v| (v - max).exp());
                let sum = row.sum();
                row.mapv_inplace(|v| v / sum);
            }
            out
        });
        self.push(
            value,
            vec![a.0],
            Some(Box::new(|g, _, out, need| {
                vec![need[0].then(|| {
                    let mut gx = Array2::zeros(out.dim());
                    for i in 0..out.nrows() {
                        let dot: f64 = (0..out.ncols()).map(|j| g[[i, j]] * out[[i, j]]).sum();
                        for j in 0..out.ncols() {
                            gx[[i, j]] = out[[i, j]] * (g[[i, j]] - dot);
                        }
                    }
                    gx
                })]
            })),
        )
    }

    /// Mean of the rows flagged valid, as a 1xN row. At least one row must be valid.
    pub fn mean_rows_masked(&self, a: Var, valid: &[bool]) -> Var {
        let count = valid.iter().filter(|&&v| v).count();
        assert!(count > 0, "mean_rows_masked: no valid rows");
        let valid = valid.to_vec();
        let value = self.with_values(|n| {
            let x = &n[a.0].value;
            assert_eq!(x.nrows(), valid.len(), "mean_rows_masked: mask length");
            let mut acc = Array2::zeros((1, x.ncols()));
            for (i, row) in x.rows().into_iter().enumerate() {
                if valid[i] {
                    for (j, &v) in row.iter().enumerate() {
                        acc[[0, j]] += v;
                    }
                }
            }
            acc / count as f64
        });
        self.push(
            value,
            vec![a.0],
            Some(Box::new(move |g, parents, _, need| {
                vec![need[0].then(|| {
                    let mut gx = Array2::zeros(parents[0].dim());
                    let k = count as f64;
                    for (i, &ok) in valid.iter().enumerate() {
                        if ok {
                            for j in 0..gx.ncols() {
                                gx[[i, j]] = g[[0, j]] / k;
                            }
                        }
                    }
                    gx
                })]
            })),
        )
    }

    // ---- shape plumbing ----

    pub fn concat_rows(&self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let (value, row_counts) = self.with_values(|n| {
            let views: Vec<_> = parts.iter().map(|p| n[p.0].value.view()).collect();
            let counts: Vec<usize> = views.iter().map(|v| v.nrows()).collect();
            (concatenate(Axis(0), &views).expect("concat_rows: width mismatch"), counts)
        });
        self.push(
            value,
            parts.iter().map(|p| p.0).collect(),
            Some(Box::new(move |g, _, _, need| {
                let mut out = Vec::with_capacity(row_counts.len());
                let mut start = 0;
                for (idx, &rows) in row_counts.iter().enumerate() {
                    out.push(need[idx].then(|| g.slice(s![start..start + rows, ..]).to_owned()));
                    start += rows;
                }
                out
            })),
        )
    }

    pub fn concat_cols(&self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let (value, col_counts) = self.with_values(|n| {
            let views: Vec<_> = parts.iter().map(|p| n[p.0].value.view()).collect();
            let counts: Vec<usize> = views.iter().map(|v| v.ncols()).collect();
            (concatenate(Axis(1), &views).expect("concat_cols: height mismatch"), counts)
        });
        self.push(
            value,
            parts.iter().map(|p| p.0).collect(),
            Some(Box::new(move |g, _, _, need| {
                let mut out = Vec::with_capacity(col_counts.len());
                let mut start = 0;
                for (idx, &cols) in col_counts.iter().enumerate() {
                    out.push(need[idx].then(|| g.slice(s![.., start..start + cols]).to_owned()));
                    start += cols;
                }
                out
            })),
        )
    }

    pub fn slice_rows(&self, a: Var, start: usize, len: usize) -> Var {
        let value = self.with_values(|n| n[a.0].value.slice(s![start..start + len, ..]).to_owned());
        self.push(
            value,
            vec![a.0],
            Some(Box::new(move |g, parents, _, need| {
                vec![need[0].then(|| {
                    let mut gx = Array2::zeros(parents[0].dim());
                    gx.slice_mut(s![start..start + len, ..]).assign(g);
                    gx
                })]
            })),
        )
    }

    pub fn slice_cols(&self, a: Var, start: usize, len: usize) -> Var {
        let value = self.with_values(|n| n[a.0].value.slice(s![.., start..start + len]).to_owned());
        self.push(
            value,
            vec![a.0],
            Some(Box::new(move |g, parents, _, need| {
                vec![need[0].then(|| {
                    let mut gx = Array2::zeros(parents[0].dim());
                    gx.slice_mut(s![.., start..start + len]).assign(g);
                    gx
                })]
            })),
        )
    }

    /// Selects rows of a table by index; duplicate indices accumulate gradient.
    pub fn gather_rows(&self, table: Var, idx: &[usize]) -> Var {
        let idx = idx.to_vec();
        let value = self.with_values(|n| {
            let t = &n[table.0].value;
            let mut out = Array2::zeros((idx.len(), t.ncols()));
            for (i, &r) in idx.iter().enumerate() {
                out.row_mut(i).assign(&t.row(r));
            }
            out
        });
        self.push(
            value,
            vec![table.0],
            Some(Box::new(move |g, parents, _, need| {
                vec![need[0].then(|| {
                    let mut gt = Array2::zeros(parents[0].dim());
                    for (i, &r) in idx.iter().enumerate() {
                        for j in 0..g.ncols() {
                            gt[[r, j]] += g[[i, j]];
                        }
                    }
                    gt
                })]
            })),
        )
    }

    /// Tiles a 1xN row m times into an mxN matrix.
    pub fn repeat_row(&self, row: Var, m: usize) -> Var {
        let value = self.with_values(|n| {
            let r = &n[row.0].value;
            assert_eq!(r.nrows(), 1, "repeat_row: input must be 1xN");
            let mut out = Array2::zeros((m, r.ncols()));
            for i in 0..m {
                out.row_mut(i).assign(&r.row(0));
            }
            out
        });
        self.push(
            value,
            vec![row.0],
            Some(Box::new(|g, _, _, need| {
                vec![need[0].then(|| g.sum_axis(Axis(0)).insert_axis(Axis(0)))]
            })),
        )
    }

    /// Row-major reshape (layout-agnostic: elements are taken in logical order).
    pub fn reshape(&self, a: Var, rows: usize, cols: usize) -> Var {
        let value = self.with_values(|n| {
            let x = &n[a.0].value;
            assert_eq!(x.len(), rows * cols, "reshape: element count mismatch");
            Array2::from_shape_vec((rows, cols), x.iter().copied().collect())
                .expect("reshape: shape")
        });
        self.push(
            value,
            vec![a.0],
            Some(Box::new(move |g, parents, _, need| {
                vec![need[0].then(|| {
                    Array2::from_shape_vec(parents[0].dim(), g.iter().copied().collect())
                        .expect("reshape backward")
                })]
            })),
        )
    }

    /// Picks one column per row: out[i, 0] = a[i, idx[i]].
    pub fn select_per_row(&self, a: Var, idx: &[usize]) -> Var {
        let idx = idx.to_vec();
        let value = self.with_values(|n| {
            let x = &n[a.0].value;
            assert_eq!(x.nrows(), idx.len());
            let mut out = Array2::zeros((idx.len(), 1));
            for (i, &c) in idx.iter().enumerate() {
                out[[i, 0]] = x[[i, c]];
            }
            out
        });
        self.push(
            value,
            vec![a.0],
            Some(Box::new(move |g, parents, _, need| {
                vec![need[0].then(|| {
                    let mut gx = Array2::zeros(parents[0].dim());
                    for (i, &c) in idx.iter().enumerate() {
                        gx[[i, c]] = g[[i, 0]];
                    }
                    gx
                })]
            })),
        )
    }

    // ---- losses ----

    /// Weighted sum of squared errors: sum_i w_i (pred_i - target_i)^2, a 1x1 scalar.
    pub fn weighted_sq_err(&self, pred: Var, targets: &Array2<f64>, weights: &Array2<f64>) -> Var {
        let targets = targets.clone();
        let weights = weights.clone();
        let value = self.with_values(|n| {
            let p = &n[pred.0].value;
            assert_eq!(p.dim(), targets.dim());
            assert_eq!(p.dim(), weights.dim());
            let mut acc = 0.0;
            for ((pv, tv), wv) in p.iter().zip(targets.iter()).zip(weights.iter()) {
                let d = pv - tv;
                acc += wv * d * d;
            }
            Array2::from_elem((1, 1), acc)
        });
        self.push(
            value,
            vec![pred.0],
            Some(Box::new(move |g, parents, _, need| {
                vec![need[0].then(|| {
                    let scale = g[[0, 0]];
                    let mut gp = Array2::zeros(parents[0].dim());
                    for (i, ((pv, tv), wv)) in parents[0]
                        .iter()
                        .zip(targets.iter())
                        .zip(weights.iter())
                        .enumerate()
                    {
                        let r = i / gp.ncols();
                        let c = i % gp.ncols();
                        gp[[r, c]] = scale * 2.0 * wv * (pv - tv);
                    }
                    gp
                })]
            })),
        )
    }

    /// Cross-entropy of a 1xC logit row against an integer label, a 1x1 scalar.
    pub fn cross_entropy_logits(&self, logits: Var, label: usize) -> Var {
        let value = self.with_values(|n| {
            let z = &n[logits.0].value;
            assert_eq!(z.nrows(), 1);
            assert!(label < z.ncols(), "cross_entropy_logits: label out of range");
            let max = z.row(0).fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            let lse = max + z.row(0).mapv(|v| (v - max).exp()).sum().ln();
            Array2::from_elem((1, 1), lse - z[[0, label]])
        });
        self.push(
            value,
            vec![logits.0],
            Some(Box::new(move |g, parents, _, need| {
                vec![need[0].then(|| {
                    let z = parents[0];
                    let scale = g[[0, 0]];
                    let max = z.row(0).fold(f64::NEG_INFINITY, |m, &v| m.max(v));
                    let exps = z.row(0).mapv(|v| (v - max).exp());
                    let sum = exps.sum();
                    let mut gz = Array2::zeros(z.dim());
                    for j in 0..z.ncols() {
                        gz[[0, j]] = scale * (exps[j] / sum - if j == label { 1.0 } else { 0.0 });
                    }
                    gz
                })]
            })),
        )
    }

    /// Reverse pass from a scalar root. The root seed gradient is 1.
    pub fn backward(&self, root: Var) -> Gradients {
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[root.0].value.dim(), (1, 1), "backward: root must be scalar");
        let mut grads: Vec<Option<Array2<f64>>> = (0..nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Array2::from_elem((1, 1), 1.0));
        for i in (0..=root.0).rev() {
            if grads[i].is_none() {
                continue;
            }
            // Leaves have no backward fn and keep their accumulated gradient.
            let Some(back) = nodes[i].backward.as_ref() else { continue };
            let g_out = std::mem::take(&mut grads[i]).unwrap();
            let parent_vals: Vec<&Array2<f64>> =
                nodes[i].parents.iter().map(|&p| &nodes[p].value).collect();
            let need: Vec<bool> = nodes[i].parents.iter().map(|&p| nodes[p].needs_grad).collect();
            let pgrads = back(&g_out, &parent_vals, &nodes[i].value, &need);
            for (slot, pg) in nodes[i].parents.iter().zip(pgrads) {
                if let Some(pg) = pg {
                    match grads[*slot].as_mut() {
                        Some(acc) => *acc += &pg,
                        None => grads[*slot] = Some(pg),
                    }
                }
            }
        }
        Gradients { grads }
    }
}
