//! Tape-based reverse-mode differentiation over [`Mat`] values.

use super::ops::{rms, rope_rows, sigmoid, silu, softmax, softmax_rows};
use super::Mat;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

#[derive(Debug)]
enum Op {
    Leaf,
    /// a·bᵀ
    MatMulNT(Var, Var),
    /// a·b
    MatMul(Var, Var),
    Add(Var, Var),
    Scale(Var, f64),
    Mul(Var, Var),
    Silu(Var),
    RmsNorm { x: Var, g: Vec<f64>, eps: f64 },
    Rope { x: Var, head_dim: usize, base: f64 },
    ColSlice { x: Var, start: usize },
    Concat(Vec<Var>),
    Softmax { x: Var },
    /// Mean negative log-likelihood over rows with a target.
    CrossEntropy { logits: Var, targets: Vec<Option<usize>>, probs: Mat, count: usize },
}

#[derive(Debug)]
struct Node {
    value: Mat,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Mat, op: Op, parents: &[Var]) -> Var {
        let needs_grad = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// A differentiable input.
    pub fn param(&mut self, value: Mat) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Mat) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul_nt(self.value(b));
        self.push(v, Op::MatMulNT(a, b), &[a, b])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul(self.value(b));
        self.push(v, Op::MatMul(a, b), &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).add(self.value(b));
        self.push(v, Op::Add(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).scale(s);
        self.push(v, Op::Scale(a, s), &[a])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push(v, Op::Mul(a, b), &[a, b])
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(silu);
        self.push(v, Op::Silu(a), &[a])
    }

    /// Row-wise RMSNorm with a constant gain.
    pub fn rmsnorm(&mut self, x: Var, g: &[f64], eps: f64) -> Var {
        let xv = self.value(x);
        let mut out = xv.clone();
        for r in 0..xv.rows {
            let s = rms(xv.row(r), eps);
            for (o, gi) in out.row_mut(r).iter_mut().zip(g) {
                *o = *o * gi / s;
            }
        }
        self.push(out, Op::RmsNorm { x, g: g.to_vec(), eps }, &[x])
    }

    pub fn rope(&mut self, x: Var, head_dim: usize, base: f64) -> Var {
        let v = rope_rows(self.value(x), head_dim, base, 1.0);
        self.push(v, Op::Rope { x, head_dim, base }, &[x])
    }

    pub fn col_slice(&mut self, x: Var, start: usize, len: usize) -> Var {
        let v = self.value(x).col_slice(start, len);
        self.push(v, Op::ColSlice { x, start }, &[x])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let mats: Vec<Mat> = parts.iter().map(|p| self.value(*p).clone()).collect();
        let v = Mat::concat_cols(&mats);
        self.push(v, Op::Concat(parts.to_vec()), parts)
    }

    /// Causal row softmax (entries right of the diagonal are 0).
    pub fn causal_softmax(&mut self, x: Var) -> Var {
        let v = softmax_rows(self.value(x), true);
        self.push(v, Op::Softmax { x }, &[x])
    }

    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Var {
        let lv = self.value(logits);
        assert_eq!(lv.rows, targets.len(), "one target slot per row");
        let mut probs = Mat::zeros(lv.rows, lv.cols);
        let (mut total, mut count) = (0.0, 0usize);
        for (r, t) in targets.iter().enumerate() {
            let row = lv.row(r);
            let p = softmax(row);
            if let Some(t) = *t {
                let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
                total += lse - row[t];
                count += 1;
            }
            probs.row_mut(r).copy_from_slice(&p);
        }
        assert!(count > 0, "cross entropy needs at least one target");
        let v = Mat::from_vec(1, 1, vec![total / count as f64]);
        self.push(
            v,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
                count,
            },
            &[logits],
        )
    }

    /// Gradients of scalar `loss` w.r.t. every node (None where not needed).
    pub fn backward(&self, loss: Var) -> Vec<Option<Mat>> {
        assert_eq!(self.value(loss).shape(), (1, 1), "loss must be a scalar");
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Mat::filled(1, 1, 1.0));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(dy) = grads[i].take() else { continue };
            let send = |grads: &mut Vec<Option<Mat>>, p: Var, g: Mat| {
                if !self.nodes[p.0].needs_grad {
                    return;
                }
                match &mut grads[p.0] {
                    Some(acc) => acc.add_assign(&g),
                    slot => *slot = Some(g),
                }
            };
            match &node.op {
                Op::Leaf => {
                    grads[i] = Some(dy);
                    continue;
                }
                Op::MatMulNT(a, b) => {
                    // y = a·bᵀ: da = dy·b, db = dyᵀ·a
                    if self.nodes[a.0].needs_grad {
                        send(&mut grads, *a, dy.matmul(self.value(*b)));
                    }
                    if self.nodes[b.0].needs_grad {
                        send(&mut grads, *b, dy.matmul_tn(self.value(*a)));
                    }
                }
                Op::MatMul(a, b) => {
                    if self.nodes[a.0].needs_grad {
                        send(&mut grads, *a, dy.matmul_nt(self.value(*b)));
                    }
                    if self.nodes[b.0].needs_grad {
                        send(&mut grads, *b, self.value(*a).matmul_tn(&dy));
                    }
                }
                Op::Add(a, b) => {
                    send(&mut grads, *a, dy.clone());
                    send(&mut grads, *b, dy);
                }
                Op::Scale(a, s) => send(&mut grads, *a, dy.scale(*s)),
                Op::Mul(a, b) => {
                    send(&mut grads, *a, dy.zip_map(self.value(*b), |g, y| g * y));
                    send(&mut grads, *b, dy.zip_map(self.value(*a), |g, x| g * x));
                }
                Op::Silu(a) => {
                    let d = self.value(*a).map(|z| {
                        let s = sigmoid(z);
                        s * (1.0 + z * (1.0 - s))
                    });
                    send(&mut grads, *a, dy.zip_map(&d, |g, y| g * y));
                }
                Op::RmsNorm { x, g, eps } => {
                    let xv = self.value(*x);
                    let n = xv.cols as f64;
                    let mut dx = Mat::zeros(xv.rows, xv.cols);
                    for r in 0..xv.rows {
                        let xr = xv.row(r);
                        let s = rms(xr, *eps);
                        let u: Vec<f64> = dy.row(r).iter().zip(g).map(|(d, gi)| d * gi).collect();
                        let ux: f64 = u.iter().zip(xr).map(|(a, b)| a * b).sum();
                        for ((o, ui), xi) in dx.row_mut(r).iter_mut().zip(&u).zip(xr) {
                            *o = ui / s - xi * ux / (n * s * s * s);
                        }
                    }
                    send(&mut grads, *x, dx);
                }
                Op::Rope { x, head_dim, base } => {
                    send(&mut grads, *x, rope_rows(&dy, *head_dim, *base, -1.0));
                }
                Op::ColSlice { x, start } => {
                    let xv = self.value(*x);
                    let mut dx = Mat::zeros(xv.rows, xv.cols);
                    for r in 0..dy.rows {
                        dx.row_mut(r)[*start..*start + dy.cols].copy_from_slice(dy.row(r));
                    }
                    send(&mut grads, *x, dx);
                }
                Op::Concat(parts) => {
                    let mut c0 = 0;
                    for p in parts {
                        let w = self.value(*p).cols;
                        send(&mut grads, *p, dy.col_slice(c0, w));
                        c0 += w;
                    }
                }
                Op::Softmax { x } => {
                    let y = &node.value;
                    let mut dx = Mat::zeros(y.rows, y.cols);
                    for r in 0..y.rows {
                        let dot: f64 = y.row(r).iter().zip(dy.row(r)).map(|(a, b)| a * b).sum();
                        for ((o, yi), gi) in dx.row_mut(r).iter_mut().zip(y.row(r)).zip(dy.row(r)) {
                            *o = yi * (gi - dot);
                        }
                    }
                    send(&mut grads, *x, dx);
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    probs,
                    count,
                } => {
                    let g = dy.data[0] / *count as f64;
                    let mut dx = Mat::zeros(probs.rows, probs.cols);
                    for (r, t) in targets.iter().enumerate() {
                        if let Some(t) = *t {
                            for (o, p) in dx.row_mut(r).iter_mut().zip(probs.row(r)) {
                                *o = g * p;
                            }
                            *dx.at_mut(r, t) -= g;
                        }
                    }
                    send(&mut grads, *logits, dx);
                }
            }
        }
        grads
    }
}
