//! Fixed-op reverse-mode gradient tape.
//!
//! The confidence GCN needs exactly six operations: dense matmul, sparse
//! propagation, column concatenation, the rectifier, a broadcast scalar add,
//! and a mean-absolute-error reduction. Recording just these keeps every
//! backward rule small enough to verify against finite differences.
//!
//! Conventions: the rectifier derivative at 0 is 0, and the subgradient of
//! |x| at 0 is 0.

use crate::linalg::{CsrMatrix, Mat};

pub(crate) type NodeId = usize;

enum Op<'a> {
    Leaf,
    /// C = A B
    MatMul(NodeId, NodeId),
    /// Y = S X with S a constant sparse matrix
    SpMm(&'a CsrMatrix, NodeId),
    /// Y = [A | B]
    ConcatCols(NodeId, NodeId),
    /// Y = max(X, 0)
    Relu(NodeId),
    /// Y = X + s, s a 1x1 node broadcast over all entries
    AddScalar(NodeId, NodeId),
    /// 1x1 loss: mean |X - target|
    L1Mean(NodeId, Mat),
}

struct Node<'a> {
    value: Mat,
    op: Op<'a>,
}

pub(crate) struct Tape<'a> {
    nodes: Vec<Node<'a>>,
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn value(&self, id: NodeId) -> &Mat {
        &self.nodes[id].value
    }

    fn push(&mut self, value: Mat, op: Op<'a>) -> NodeId {
        self.nodes.push(Node { value, op });
        self.nodes.len() - 1
    }

    pub fn leaf(&mut self, value: Mat) -> NodeId {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let value = self.nodes[a].value.matmul(&self.nodes[b].value);
        self.push(value, Op::MatMul(a, b))
    }

    pub fn spmm(&mut self, s: &'a CsrMatrix, x: NodeId) -> NodeId {
        let value = s.matmul_dense(&self.nodes[x].value);
        self.push(value, Op::SpMm(s, x))
    }

    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let value = self.nodes[a].value.concat_cols(&self.nodes[b].value);
        self.push(value, Op::ConcatCols(a, b))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let mut value = self.nodes[x].value.clone();
        for v in value.as_mut_slice() {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
        self.push(value, Op::Relu(x))
    }

    pub fn add_scalar(&mut self, x: NodeId, s: NodeId) -> NodeId {
        assert_eq!(self.nodes[s].value.rows() * self.nodes[s].value.cols(), 1);
        let b = self.nodes[s].value.get(0, 0);
        let mut value = self.nodes[x].value.clone();
        for v in value.as_mut_slice() {
            *v += b;
        }
        self.push(value, Op::AddScalar(x, s))
    }

    pub fn l1_mean(&mut self, x: NodeId, target: Mat) -> NodeId {
        let pred = &self.nodes[x].value;
        assert_eq!((pred.rows(), pred.cols()), (target.rows(), target.cols()));
        let n = (pred.rows() * pred.cols()) as f64;
        let loss = pred
            .as_slice()
            .iter()
            .zip(target.as_slice())
            .map(|(p, t)| (p - t).abs())
            .sum::<f64>()
            / n;
        self.push(Mat::from_vec(1, 1, vec![loss]), Op::L1Mean(x, target))
    }

    /// Backpropagate from a 1x1 root; returns one gradient per node.
    pub fn backward(&self, root: NodeId) -> Vec<Mat> {
        let mut grads: Vec<Mat> = self
            .nodes
            .iter()
            .map(|n| Mat::zeros(n.value.rows(), n.value.cols()))
            .collect();
        assert_eq!(grads[root].as_slice().len(), 1, "root must be scalar");
        grads[root].set(0, 0, 1.0);

        for id in (0..=root).rev() {
            let g = grads[id].clone();
            match &self.nodes[id].op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let da = g.matmul(&self.nodes[*b].value.transpose());
                    let db = self.nodes[*a].value.transpose().matmul(&g);
                    grads[*a].add_assign(&da);
                    grads[*b].add_assign(&db);
                }
                Op::SpMm(s, x) => {
                    let dx = s.transpose_matmul_dense(&g);
                    grads[*x].add_assign(&dx);
                }
                Op::ConcatCols(a, b) => {
                    let ca = self.nodes[*a].value.cols();
                    let (ra, cb) = (self.nodes[*a].value.rows(), self.nodes[*b].value.cols());
                    let mut da = Mat::zeros(ra, ca);
                    let mut db = Mat::zeros(ra, cb);
                    for i in 0..ra {
                        da.row_mut(i).copy_from_slice(&g.row(i)[..ca]);
                        db.row_mut(i).copy_from_slice(&g.row(i)[ca..]);
                    }
                    grads[*a].add_assign(&da);
                    grads[*b].add_assign(&db);
                }
                Op::Relu(x) => {
                    let mut dx = g.clone();
                    for (d, &v) in dx.as_mut_slice().iter_mut().zip(self.nodes[*x].value.as_slice()) {
                        if v <= 0.0 {
                            *d = 0.0;
                        }
                    }
                    grads[*x].add_assign(&dx);
                }
                Op::AddScalar(x, s) => {
                    grads[*x].add_assign(&g);
                    let total: f64 = g.as_slice().iter().sum();
                    let gs = grads[*s].get(0, 0);
                    grads[*s].set(0, 0, gs + total);
                }
                Op::L1Mean(x, target) => {
                    let scale = g.get(0, 0)
                        / (self.nodes[*x].value.rows() * self.nodes[*x].value.cols()) as f64;
                    let mut dx = Mat::zeros(grads[*x].rows(), grads[*x].cols());
                    for ((d, &p), &t) in dx
                        .as_mut_slice()
                        .iter_mut()
                        .zip(self.nodes[*x].value.as_slice())
                        .zip(target.as_slice())
                    {
                        *d = scale * (p - t).signum() * if p == t { 0.0 } else { 1.0 };
                    }
                    grads[*x].add_assign(&dx);
                }
            }
        }
        grads
    }
}
