//! Convolutions and the affine map, all lowered onto `gemm`.

use super::gemm::{gemm, MatMut, MatRef};
use super::graph::{rank3, GradSink, Graph, Op, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Fills `cols[(ci * k + j) * t_out + t] = x[ci, t * stride + j - pad]`.
fn im2col(x: &[f64], in_ch: usize, t_in: usize, k: usize, stride: usize, pad: usize, t_out: usize, cols: &mut [f64]) {
    for ci in 0..in_ch {
        let row = &x[ci * t_in..(ci + 1) * t_in];
        for j in 0..k {
            let dst = &mut cols[(ci * k + j) * t_out..(ci * k + j + 1) * t_out];
            for (t, d) in dst.iter_mut().enumerate() {
                let p = (t * stride + j) as isize - pad as isize;
                *d = if p >= 0 && (p as usize) < t_in { row[p as usize] } else { 0.0 };
            }
        }
    }
}

/// Scatter-adds the inverse of [`im2col`] into `x`.
fn col2im(cols: &[f64], in_ch: usize, t_in: usize, k: usize, stride: usize, pad: usize, t_out: usize, x: &mut [f64]) {
    for ci in 0..in_ch {
        let row = &mut x[ci * t_in..(ci + 1) * t_in];
        for j in 0..k {
            let src = &cols[(ci * k + j) * t_out..(ci * k + j + 1) * t_out];
            for (t, s) in src.iter().enumerate() {
                let p = (t * stride + j) as isize - pad as isize;
                if p >= 0 && (p as usize) < t_in {
                    row[p as usize] += s;
                }
            }
        }
    }
}

impl Graph {
    /// 1-D cross-correlation. `x: [batch, in_ch, time]`,
    /// `w: [out_ch, in_ch, k]`, optional `b: [out_ch]`.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let [bs, cin, t] = rank3("conv1d", self.shape(x))?;
        let [cout, wcin, k] = rank3("conv1d", self.shape(w))?;
        if cin != wcin {
            return Err(Error::shape(
                "conv1d",
                format!(
                    "input {:?} has {cin} channels but kernel {:?} expects {wcin}",
                    self.shape(x),
                    self.shape(w)
                ),
            ));
        }
        if stride == 0 {
            return Err(Error::invalid("conv1d stride must be positive"));
        }
        if k > t + 2 * pad {
            return Err(Error::shape(
                "conv1d",
                format!("kernel length {k} exceeds padded input length {}", t + 2 * pad),
            ));
        }
        if let Some(b) = b {
            if self.shape(b) != [cout] {
                return Err(Error::shape("conv1d", format!("bias {:?} for {cout} outputs", self.shape(b))));
            }
        }
        let t_out = (t + 2 * pad - k) / stride + 1;
        let xd = self.data(x);
        let wd = self.data(w);
        let mut out = vec![0.0; bs * cout * t_out];
        let mut cols = vec![0.0; cin * k * t_out];
        for bi in 0..bs {
            im2col(&xd[bi * cin * t..(bi + 1) * cin * t], cin, t, k, stride, pad, t_out, &mut cols);
            let o = &mut out[bi * cout * t_out..(bi + 1) * cout * t_out];
            gemm(1.0, MatRef::new(wd, cout, cin * k), MatRef::new(&cols, cin * k, t_out), 0.0, MatMut::new(o, cout, t_out));
        }
        if let Some(b) = b {
            let bd = self.data(b);
            for (row, bias) in out.chunks_mut(t_out).zip(bd.iter().cycle()) {
                row.iter_mut().for_each(|v| *v += bias);
            }
        }
        let tensor = Tensor::new(out, &[bs, cout, t_out])?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push_op(tensor, Op::Conv1d { x, w, b, stride, pad }, &inputs))
    }

    /// Transposed 1-D convolution with overlap-add of the contributions.
    /// `x: [batch, ch, frames]`, `w: [ch, out_ch, k]`.
    pub fn conv_transpose1d(&mut self, x: Var, w: Var, stride: usize) -> Result<Var> {
        let [bs, cin, f] = rank3("conv_transpose1d", self.shape(x))?;
        let [wcin, cout, k] = rank3("conv_transpose1d", self.shape(w))?;
        if cin != wcin {
            return Err(Error::shape(
                "conv_transpose1d",
                format!(
                    "input {:?} has {cin} channels but kernel {:?} expects {wcin}",
                    self.shape(x),
                    self.shape(w)
                ),
            ));
        }
        if stride == 0 {
            return Err(Error::invalid("conv_transpose1d stride must be positive"));
        }
        let t_out = (f - 1) * stride + k;
        let xd = self.data(x);
        let wd = self.data(w);
        let mut out = vec![0.0; bs * cout * t_out];
        let mut cols = vec![0.0; cout * k * f];
        for bi in 0..bs {
            // cols[(co, j), frame] = sum_ci w[ci, (co, j)] * x[ci, frame]
            gemm(
                1.0,
                MatRef::new(wd, cin, cout * k).t(),
                MatRef::new(&xd[bi * cin * f..(bi + 1) * cin * f], cin, f),
                0.0,
                MatMut::new(&mut cols, cout * k, f),
            );
            col2im(&cols, cout, t_out, k, stride, 0, f, &mut out[bi * cout * t_out..(bi + 1) * cout * t_out]);
        }
        let tensor = Tensor::new(out, &[bs, cout, t_out])?;
        Ok(self.push_op(tensor, Op::ConvTranspose1d { x, w, stride }, &[x, w]))
    }

    /// Affine map over the trailing axis: `x: [..., in]`, `w: [out, in]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let din = *xs.last().unwrap();
        if ws.len() != 2 || ws[1] != din {
            return Err(Error::shape("linear", format!("input {xs:?} against weight {ws:?}")));
        }
        let dout = ws[0];
        if let Some(b) = b {
            if self.shape(b) != [dout] {
                return Err(Error::shape("linear", format!("bias {:?} for {dout} outputs", self.shape(b))));
            }
        }
        let rows = self.value(x).numel() / din;
        let mut out = vec![0.0; rows * dout];
        if let Some(b) = b {
            let bd = self.data(b);
            out.chunks_mut(dout).for_each(|r| r.copy_from_slice(bd));
        }
        gemm(
            1.0,
            MatRef::new(self.data(x), rows, din),
            MatRef::new(self.data(w), dout, din).t(),
            1.0,
            MatMut::new(&mut out, rows, dout),
        );
        let mut shape = xs;
        *shape.last_mut().unwrap() = dout;
        let tensor = Tensor::new(out, &shape)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push_op(tensor, Op::Linear { x, w, b }, &inputs))
    }
}

pub(crate) fn conv1d_backward(s: &mut GradSink<'_>, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize, g: &[f64]) {
    let graph = s.graph;
    let [bs, cin, t] = <[usize; 3]>::try_from(graph.shape(x)).unwrap();
    let [cout, _, k] = <[usize; 3]>::try_from(graph.shape(w)).unwrap();
    let t_out = g.len() / (bs * cout);
    let xd = graph.data(x);
    let wd = graph.data(w);
    if let Some(b) = b {
        s.with(b, |buf| {
            for (row, c) in g.chunks(t_out).zip((0..cout).cycle()) {
                buf[c] += row.iter().sum::<f64>();
            }
        });
    }
    let mut cols = vec![0.0; cin * k * t_out];
    if s.wants(w) {
        s.with(w, |dw| {
            for bi in 0..bs {
                im2col(&xd[bi * cin * t..(bi + 1) * cin * t], cin, t, k, stride, pad, t_out, &mut cols);
                let gb = &g[bi * cout * t_out..(bi + 1) * cout * t_out];
                gemm(1.0, MatRef::new(gb, cout, t_out), MatRef::new(&cols, cin * k, t_out).t(), 1.0, MatMut::new(dw, cout, cin * k));
            }
        });
    }
    if s.wants(x) {
        s.with(x, |dx| {
            for bi in 0..bs {
                let gb = &g[bi * cout * t_out..(bi + 1) * cout * t_out];
                gemm(1.0, MatRef::new(wd, cout, cin * k).t(), MatRef::new(gb, cout, t_out), 0.0, MatMut::new(&mut cols, cin * k, t_out));
                col2im(&cols, cin, t, k, stride, pad, t_out, &mut dx[bi * cin * t..(bi + 1) * cin * t]);
            }
        });
    }
}

pub(crate) fn conv_transpose1d_backward(s: &mut GradSink<'_>, x: Var, w: Var, stride: usize, g: &[f64]) {
    let graph = s.graph;
    let [bs, cin, f] = <[usize; 3]>::try_from(graph.shape(x)).unwrap();
    let [_, cout, k] = <[usize; 3]>::try_from(graph.shape(w)).unwrap();
    let t_out = (f - 1) * stride + k;
    let xd = graph.data(x);
    let wd = graph.data(w);
    // dcols[(co, j), frame] = g[co, frame * stride + j]
    let mut dcols = vec![0.0; bs * cout * k * f];
    for bi in 0..bs {
        im2col(
            &g[bi * cout * t_out..(bi + 1) * cout * t_out],
            cout,
            t_out,
            k,
            stride,
            0,
            f,
            &mut dcols[bi * cout * k * f..(bi + 1) * cout * k * f],
        );
    }
    s.with(w, |dw| {
        for bi in 0..bs {
            gemm(
                1.0,
                MatRef::new(&xd[bi * cin * f..(bi + 1) * cin * f], cin, f),
                MatRef::new(&dcols[bi * cout * k * f..(bi + 1) * cout * k * f], cout * k, f).t(),
                1.0,
                MatMut::new(dw, cin, cout * k),
            );
        }
    });
    s.with(x, |dx| {
        for bi in 0..bs {
            gemm(
                1.0,
                MatRef::new(wd, cin, cout * k),
                MatRef::new(&dcols[bi * cout * k * f..(bi + 1) * cout * k * f], cout * k, f),
                1.0,
                MatMut::new(&mut dx[bi * cin * f..(bi + 1) * cin * f], cin, f),
            );
        }
    });
}

pub(crate) fn linear_backward(s: &mut GradSink<'_>, x: Var, w: Var, b: Option<Var>, g: &[f64]) {
    let graph = s.graph;
    let ws = graph.shape(w);
    let (dout, din) = (ws[0], ws[1]);
    let rows = g.len() / dout;
    let xd = graph.data(x);
    let wd = graph.data(w);
    if let Some(b) = b {
        s.with(b, |db| {
            for row in g.chunks(dout) {
                db.iter_mut().zip(row).for_each(|(a, v)| *a += v);
            }
        });
    }
    s.with(w, |dw| {
        gemm(1.0, MatRef::new(g, rows, dout).t(), MatRef::new(xd, rows, din), 1.0, MatMut::new(dw, dout, din));
    });
    s.with(x, |dx| {
        gemm(1.0, MatRef::new(g, rows, dout), MatRef::new(wd, dout, din), 1.0, MatMut::new(dx, rows, din));
    });
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(d: &[f64], s: &[usize]) -> Tensor {
        Tensor::new(d.to_vec(), s).unwrap()
    }

    #[test]
    fn conv1d_identity_kernel() {
        let mut g = Graph::new();
        let x = g.constant(t(&[1.0, 2.0, 3.0, 4.0], &[1, 1, 4]));
        let w = g.constant(t(&[1.0], &[1, 1, 1]));
        let y = g.conv1d(x, w, None, 1, 0).unwrap();
        assert_eq!(g.data(y), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn conv1d_strided_window_sum() {
        let mut g = Graph::new();
        let x = g.constant(t(&[1.0, 2.0, 3.0, 4.0], &[1, 1, 4]));
        let w = g.constant(t(&[1.0, 1.0], &[1, 1, 2]));
        let y = g.conv1d(x, w, None, 2, 0).unwrap();
        assert_eq!(g.shape(y), &[1, 1, 2]);
        assert_eq!(g.data(y), &[3.0, 7.0]);
    }

    #[test]
    fn conv1d_output_length_formula() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[2, 3, 23]));
        let w = g.constant(Tensor::zeros(&[4, 3, 5]));
        let y = g.conv1d(x, w, None, 3, 2).unwrap();
        assert_eq!(g.shape(y), &[2, 4, (23 + 4 - 5) / 3 + 1]);
    }

    #[test]
    fn conv1d_channel_mismatch_names_both_shapes() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[1, 2, 8]));
        let w = g.constant(Tensor::zeros(&[1, 3, 2]));
        let msg = g.conv1d(x, w, None, 1, 0).unwrap_err().to_string();
        assert!(msg.contains("[1, 2, 8]") && msg.contains("[1, 3, 2]"), "{msg}");
    }

    #[test]
    fn conv1d_kernel_longer_than_input() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[1, 1, 3]));
        let w = g.constant(Tensor::zeros(&[1, 1, 4]));
        assert!(g.conv1d(x, w, None, 1, 0).is_err());
        assert!(g.conv1d(x, w, None, 1, 1).is_ok());
    }

    #[test]
    fn transposed_overlap_add() {
        let mut g = Graph::new();
        let x = g.constant(t(&[1.0, 1.0], &[1, 1, 2]));
        let w = g.constant(t(&[1.0, 1.0], &[1, 1, 2]));
        let y = g.conv_transpose1d(x, w, 1).unwrap();
        assert_eq!(g.data(y), &[1.0, 2.0, 1.0]);

        let w1 = g.constant(t(&[1.0], &[1, 1, 1]));
        let y = g.conv_transpose1d(x, w1, 1).unwrap();
        assert_eq!(g.data(y), &[1.0, 1.0]);
    }

    #[test]
    fn conv_then_transpose_preserves_length_when_kernel_equals_stride() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_fn(&[1, 1, 24], |i| i as f64));
        let w = g.constant(Tensor::full(&[3, 1, 4], 0.5));
        let y = g.conv1d(x, w, None, 4, 0).unwrap();
        let w2 = g.constant(Tensor::full(&[3, 1, 4], 0.5));
        let z = g.conv_transpose1d(y, w2, 4).unwrap();
        assert_eq!(g.shape(z), &[1, 1, 24]);
    }

    #[test]
    fn linear_examples() {
        let mut g = Graph::new();
        let x = g.constant(t(&[2.0, 3.0], &[2]));
        let w = g.constant(t(&[1.0, 1.0], &[1, 2]));
        let b = g.constant(t(&[1.0], &[1]));
        let y = g.linear(x, w, Some(b)).unwrap();
        assert_eq!(g.data(y), &[6.0]);

        let x = g.constant(t(&[1.0, -2.0, 0.5, 4.0], &[2, 2]));
        let eye = g.constant(t(&[1.0, 0.0, 0.0, 1.0], &[2, 2]));
        let zero = g.constant(t(&[0.0, 0.0], &[2]));
        let y = g.linear(x, eye, Some(zero)).unwrap();
        assert_eq!(g.data(y), &[1.0, -2.0, 0.5, 4.0]);

        let bad = g.constant(Tensor::zeros(&[2, 3]));
        assert!(g.linear(x, bad, None).is_err());
    }
}
