//! Minimal reverse-mode differentiation over dense matrices.
//!
//! Every node holds a 2-D value; scalars are 1x1. Nodes are appended in
//! evaluation order, so a single reverse sweep over the node list is a valid
//! topological order for the backward pass.

use ndarray::{Array2, Axis, Zip};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Scale(Var, f64),
    /// M×N → M×1
    RowSum(Var),
    /// M×N → 1×N
    ColSum(Var),
    /// `max(x, 1)^(-1/2)`
    InvSqrtClamped(Var),
    /// `a[i,j] * v[i,0]`
    MulRows(Var, Var),
    /// `a[i,j] * w[0,j]`
    MulCols(Var, Var),
    LogSigmoid(Var),
    /// `Σ a[i,j] * weights[i,j]` → 1×1
    WeightedSum(Var, Array2<f64>),
}

#[derive(Debug)]
struct Node {
    value: Array2<f64>,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn leaf(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        self.push(value, Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).t().to_owned();
        self.push(value, Op::Transpose(a))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) + self.value(b);
        self.push(value, Op::Add(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a) * s;
        self.push(value, Op::Scale(a, s))
    }

    pub fn row_sum(&mut self, a: Var) -> Var {
        let value = self.value(a).sum_axis(Axis(1)).insert_axis(Axis(1));
        self.push(value, Op::RowSum(a))
    }

    pub fn col_sum(&mut self, a: Var) -> Var {
        let value = self.value(a).sum_axis(Axis(0)).insert_axis(Axis(0));
        self.push(value, Op::ColSum(a))
    }

    pub fn inv_sqrt_clamped(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| 1.0 / x.max(1.0).sqrt());
        self.push(value, Op::InvSqrtClamped(a))
    }

    pub fn mul_rows(&mut self, a: Var, v: Var) -> Var {
        let value = self.value(a) * self.value(v);
        self.push(value, Op::MulRows(a, v))
    }

    pub fn mul_cols(&mut self, a: Var, w: Var) -> Var {
        let value = self.value(a) * self.value(w);
        self.push(value, Op::MulCols(a, w))
    }

    pub fn log_sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(log_sigmoid);
        self.push(value, Op::LogSigmoid(a))
    }

    pub fn weighted_sum(&mut self, a: Var, weights: Array2<f64>) -> Var {
        let total = (self.value(a) * &weights).sum();
        self.push(
            Array2::from_elem((1, 1), total),
            Op::WeightedSum(a, weights),
        )
    }

    /// Gradients of the 1x1 node `output` with respect to every node.
    pub fn backward(&self, output: Var) -> Gradients {
        let mut grads: Vec<Option<Array2<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Array2::ones(self.value(output).raw_dim()));

        fn accumulate(slot: &mut Option<Array2<f64>>, g: Array2<f64>) {
            match slot {
                Some(existing) => *existing += &g,
                None => *slot = Some(g),
            }
        }

        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            match &self.nodes[idx].op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let ga = g.dot(&self.value(*b).t());
                    let gb = self.value(*a).t().dot(&g);
                    accumulate(&mut grads[a.0], ga);
                    accumulate(&mut grads[b.0], gb);
                }
                Op::Transpose(a) => accumulate(&mut grads[a.0], g.t().to_owned()),
                Op::Add(a, b) => {
                    accumulate(&mut grads[a.0], g.clone());
                    accumulate(&mut grads[b.0], g.clone());
                }
                Op::Scale(a, s) => accumulate(&mut grads[a.0], &g * *s),
                Op::RowSum(a) => {
                    let shape = self.value(*a).raw_dim();
                    accumulate(&mut grads[a.0], g.broadcast(shape).unwrap().to_owned());
                }
                Op::ColSum(a) => {
                    let shape = self.value(*a).raw_dim();
                    accumulate(&mut grads[a.0], g.broadcast(shape).unwrap().to_owned());
                }
                Op::InvSqrtClamped(a) => {
                    let mut local =
                        self.value(*a)
                            .mapv(|x| if x >= 1.0 { -0.5 * x.powf(-1.5) } else { 0.0 });
                    local *= &g;
                    accumulate(&mut grads[a.0], local);
                }
                Op::MulRows(a, v) => {
                    let ga = &g * self.value(*v);
                    let gv = (&g * self.value(*a)).sum_axis(Axis(1)).insert_axis(Axis(1));
                    accumulate(&mut grads[a.0], ga);
                    accumulate(&mut grads[v.0], gv);
                }
                Op::MulCols(a, w) => {
                    let ga = &g * self.value(*w);
                    let gw = (&g * self.value(*a)).sum_axis(Axis(0)).insert_axis(Axis(0));
                    accumulate(&mut grads[a.0], ga);
                    accumulate(&mut grads[w.0], gw);
                }
                Op::LogSigmoid(a) => {
                    let mut local = Array2::zeros(g.raw_dim());
                    Zip::from(&mut local)
                        .and(self.value(*a))
                        .and(&g)
                        .for_each(|l, &x, &gv| *l = gv * crate::attack::sigmoid(-x));
                    accumulate(&mut grads[a.0], local);
                }
                Op::WeightedSum(a, weights) => {
                    accumulate(&mut grads[a.0], weights * g[[0, 0]]);
                }
            }
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }
}

pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    /// Gradient for `v`; zero-shaped `None` when `v` does not reach the output.
    pub fn get(&self, v: Var) -> Option<&Array2<f64>> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Array2<f64>> {
        self.grads[v.0].take()
    }
}
