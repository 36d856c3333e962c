use crate::error::{shape_err, Result};
use crate::graph::{check_finite, split_axis, GradSink, Graph, Op, Var};
use crate::tensor::Tensor;

/// Row-major matrix view: (rows, cols, row stride, col stride).
#[derive(Clone, Copy)]
pub(crate) struct MatView {
    pub rows: usize,
    pub cols: usize,
    pub rs: isize,
    pub cs: isize,
}

impl MatView {
    pub fn row_major(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            rs: cols as isize,
            cs: 1,
        }
    }

    pub fn t(self) -> Self {
        Self {
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
        }
    }
}

/// `c = alpha * a·b + beta * c` with `c` row-major.
pub(crate) fn gemm(a: &[f64], av: MatView, b: &[f64], bv: MatView, c: &mut [f64], beta: f64) {
    debug_assert_eq!(av.cols, bv.rows);
    let (m, k, n) = (av.rows, av.cols, bv.cols);
    debug_assert!(c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c[..m * n].iter_mut().for_each(|v| *v *= beta);
        return;
    }
    // SAFETY: the views describe in-bounds regions of `a`, `b` and `c`
    // (checked by the callers' shape logic) and `c` does not alias them.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            av.rs,
            av.cs,
            b.as_ptr(),
            bv.rs,
            bv.cs,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

impl Graph {
    /// Matrix product of two rank-2 tensors.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err("matmul", format!("{:?} x {:?}", sa, sb)));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(
            self.value(a).data(),
            MatView::row_major(m, k),
            self.value(b).data(),
            MatView::row_major(k, n),
            &mut out,
            0.0,
        );
        check_finite("matmul", &out)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), rg))
    }

    /// Row-wise Kronecker product.
    ///
    /// Rank-1 inputs give the plain vector Kronecker product; rank-2 inputs
    /// `[B, n]` and `[B, m]` give `[B, n*m]` with `out[b, i*m + j] = a[b,i]·c[b,j]`.
    pub fn kron(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let ok = sa.len() == sb.len()
            && (sa.len() == 1 || (sa.len() == 2 && sa[0] == sb[0]));
        if !ok {
            return Err(shape_err("kron", format!("{:?} (x) {:?}", sa, sb)));
        }
        let (rows, n, m) = if sa.len() == 1 {
            (1, sa[0], sb[0])
        } else {
            (sa[0], sa[1], sb[1])
        };
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(rows * n * m);
        for r in 0..rows {
            for i in 0..n {
                let x = av[r * n + i];
                out.extend(bv[r * m..(r + 1) * m].iter().map(|y| x * y));
            }
        }
        check_finite("kron", &out)?;
        let shape = if sa.len() == 1 {
            vec![n * m]
        } else {
            vec![rows, n * m]
        };
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(shape, out)?, Op::Kron(a, b), rg))
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .shape(*inputs.first().ok_or_else(|| shape_err("concat", "no inputs"))?)
            .to_vec();
        if axis >= first.len() {
            return Err(shape_err("concat", format!("axis {} of {:?}", axis, first)));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == first.len()
                && s.iter()
                    .zip(&first)
                    .enumerate()
                    .all(|(d, (x, y))| d == axis || x == y);
            if !compatible {
                return Err(shape_err("concat", format!("{:?} vs {:?}", s, first)));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&first, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let len = self.shape(v)[axis];
                let d = self.value(v).data();
                out.extend_from_slice(&d[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let rg = inputs.iter().any(|&v| self.rg(v));
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            rg,
        ))
    }
}

pub(crate) fn matmul_backward(g_: &Graph, a: Var, b: Var, g: &[f64], sink: &mut GradSink) {
    let (sa, sb) = (g_.shape(a), g_.shape(b));
    let (m, k, n) = (sa[0], sa[1], sb[1]);
    let gv = MatView::row_major(m, n);
    if sink.wants(a) {
        // dA = G·Bᵀ
        let mut ga = vec![0.0; m * k];
        gemm(
            g,
            gv,
            g_.value(b).data(),
            MatView::row_major(k, n).t(),
            &mut ga,
            0.0,
        );
        sink.add(a, ga);
    }
    if sink.wants(b) {
        // dB = Aᵀ·G
        let mut gb = vec![0.0; k * n];
        gemm(
            g_.value(a).data(),
            MatView::row_major(m, k).t(),
            g,
            gv,
            &mut gb,
            0.0,
        );
        sink.add(b, gb);
    }
}

pub(crate) fn kron_backward(g_: &Graph, a: Var, b: Var, g: &[f64], sink: &mut GradSink) {
    let (sa, sb) = (g_.shape(a), g_.shape(b));
    let (rows, n, m) = if sa.len() == 1 {
        (1, sa[0], sb[0])
    } else {
        (sa[0], sa[1], sb[1])
    };
    let (av, bv) = (g_.value(a).data(), g_.value(b).data());
    if sink.wants(a) {
        let mut ga = vec![0.0; rows * n];
        for r in 0..rows {
            for i in 0..n {
                let base = r * n * m + i * m;
                ga[r * n + i] = (0..m).map(|j| g[base + j] * bv[r * m + j]).sum();
            }
        }
        sink.add(a, ga);
    }
    if sink.wants(b) {
        let mut gb = vec![0.0; rows * m];
        for r in 0..rows {
            for i in 0..n {
                let base = r * n * m + i * m;
                let x = av[r * n + i];
                for j in 0..m {
                    gb[r * m + j] += g[base + j] * x;
                }
            }
        }
        sink.add(b, gb);
    }
}

pub(crate) fn concat_backward(
    g_: &Graph,
    inputs: &[Var],
    axis: usize,
    g: &[f64],
    sink: &mut GradSink,
) {
    let first = g_.shape(inputs[0]);
    let (outer, _, inner) = split_axis(first, axis);
    let total: usize = inputs.iter().map(|&v| g_.shape(v)[axis]).sum();
    let mut offset = 0;
    for &v in inputs {
        let len = g_.shape(v)[axis];
        if sink.wants(v) {
            let mut gv = Vec::with_capacity(outer * len * inner);
            for o in 0..outer {
                let start = (o * total + offset) * inner;
                gv.extend_from_slice(&g[start..start + len * inner]);
            }
            sink.add(v, gv);
        }
        offset += len;
    }
}
