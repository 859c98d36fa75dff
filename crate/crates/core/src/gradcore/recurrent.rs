//! Fused LSTM layer with hand-written backpropagation through time.
//!
//! Gate order along the `4 * hidden` axis is input, forget, cell, output.

use super::gemm::{gemm, MatMut, MatRef};
use super::graph::{sigmoid, GradSink, Graph, Op, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub(crate) struct LstmSaved {
    x: Var,
    w_ih: Var,
    w_hh: Var,
    b: Var,
    reverse: bool,
    n: usize,
    frames: usize,
    hidden: usize,
    /// Post-activation gates, `[n, frames, 4 * hidden]`.
    gates: Vec<f64>,
    /// Cell states, `[n, frames, hidden]`.
    cells: Vec<f64>,
}

impl LstmSaved {
    fn step_order(&self) -> Vec<usize> {
        if self.reverse {
            (0..self.frames).rev().collect()
        } else {
            (0..self.frames).collect()
        }
    }

    fn prev(&self, t: usize) -> Option<usize> {
        if self.reverse {
            (t + 1 < self.frames).then_some(t + 1)
        } else {
            t.checked_sub(1)
        }
    }
}

impl Graph {
    /// One-direction LSTM over `x: [n, frames, in]` with zero initial state.
    /// `w_ih: [4h, in]`, `w_hh: [4h, h]`, `b: [4h]`; output `[n, frames, h]`.
    pub fn lstm(&mut self, x: Var, w_ih: Var, w_hh: Var, b: Var, reverse: bool) -> Result<Var> {
        let [n, frames, din] = match self.shape(x) {
            &[a, b, c] => [a, b, c],
            s => return Err(Error::shape("lstm", format!("expected [batch, frames, dim], got {s:?}"))),
        };
        let ws = self.shape(w_ih).to_vec();
        if ws.len() != 2 || ws[1] != din || !ws[0].is_multiple_of(4) {
            return Err(Error::shape("lstm", format!("input {:?} against w_ih {ws:?}", self.shape(x))));
        }
        let h = ws[0] / 4;
        if self.shape(w_hh) != [4 * h, h] || self.shape(b) != [4 * h] {
            return Err(Error::shape(
                "lstm",
                format!("w_hh {:?} / bias {:?} for hidden {h}", self.shape(w_hh), self.shape(b)),
            ));
        }
        let g4 = 4 * h;
        let mut gates = vec![0.0; n * frames * g4];
        let bd = self.data(b);
        gates.chunks_mut(g4).for_each(|r| r.copy_from_slice(bd));
        gemm(
            1.0,
            MatRef::new(self.data(x), n * frames, din),
            MatRef::new(self.data(w_ih), g4, din).t(),
            1.0,
            MatMut::new(&mut gates, n * frames, g4),
        );
        let whh = self.data(w_hh);
        let mut cells = vec![0.0; n * frames * h];
        let mut out = vec![0.0; n * frames * h];
        let mut saved = LstmSaved { x, w_ih, w_hh, b, reverse, n, frames, hidden: h, gates: Vec::new(), cells: Vec::new() };
        for t in saved.step_order() {
            let prev = saved.prev(t);
            if let Some(p) = prev {
                // z_t += h_{t-1} * w_hh^T
                let (hp, zt) = (&out[p * h..], &mut gates[t * g4..]);
                gemm(
                    1.0,
                    MatRef::strided(hp, n, h, frames * h, 1),
                    MatRef::new(whh, g4, h).t(),
                    1.0,
                    MatMut::strided(zt, n, g4, frames * g4, 1),
                );
            }
            for ni in 0..n {
                let z = &mut gates[(ni * frames + t) * g4..(ni * frames + t + 1) * g4];
                let base = ni * frames * h;
                for j in 0..h {
                    let i_g = sigmoid(z[j]);
                    let f_g = sigmoid(z[h + j]);
                    let c_g = z[2 * h + j].tanh();
                    let o_g = sigmoid(z[3 * h + j]);
                    z[j] = i_g;
                    z[h + j] = f_g;
                    z[2 * h + j] = c_g;
                    z[3 * h + j] = o_g;
                    let c_prev = prev.map_or(0.0, |p| cells[base + p * h + j]);
                    let c = f_g * c_prev + i_g * c_g;
                    cells[base + t * h + j] = c;
                    out[base + t * h + j] = o_g * c.tanh();
                }
            }
        }
        saved.gates = gates;
        saved.cells = cells;
        let tensor = Tensor::new(out, &[n, frames, h])?;
        Ok(self.push_op(tensor, Op::Lstm(Box::new(saved)), &[x, w_ih, w_hh, b]))
    }

    /// Bidirectional LSTM: forward and backward passes concatenated on the
    /// feature axis. `fwd`/`bwd` are `(w_ih, w_hh, b)` triples.
    pub fn bilstm(&mut self, x: Var, fwd: (Var, Var, Var), bwd: (Var, Var, Var)) -> Result<Var> {
        let a = self.lstm(x, fwd.0, fwd.1, fwd.2, false)?;
        let b = self.lstm(x, bwd.0, bwd.1, bwd.2, true)?;
        self.concat_last(a, b)
    }
}

pub(crate) fn lstm_backward(s: &mut GradSink<'_>, sv: &LstmSaved, out: &[f64], g: &[f64]) {
    let graph = s.graph;
    let (n, frames, h) = (sv.n, sv.frames, sv.hidden);
    let g4 = 4 * h;
    let din = graph.shape(sv.x)[2];
    let whh = graph.data(sv.w_hh);
    let mut dz_all = vec![0.0; n * frames * g4];
    let mut dh_next = vec![0.0; n * h];
    let mut dc_next = vec![0.0; n * h];
    let mut dwhh = vec![0.0; g4 * h];
    for t in sv.step_order().into_iter().rev() {
        let prev = sv.prev(t);
        for ni in 0..n {
            let base = ni * frames * h;
            let z = &sv.gates[(ni * frames + t) * g4..(ni * frames + t + 1) * g4];
            let dz = &mut dz_all[(ni * frames + t) * g4..(ni * frames + t + 1) * g4];
            for j in 0..h {
                let (i_g, f_g, c_g, o_g) = (z[j], z[h + j], z[2 * h + j], z[3 * h + j]);
                let c = sv.cells[base + t * h + j];
                let tc = c.tanh();
                let dh = g[base + t * h + j] + dh_next[ni * h + j];
                let d_o = dh * tc;
                let dc = dh * o_g * (1.0 - tc * tc) + dc_next[ni * h + j];
                let c_prev = prev.map_or(0.0, |p| sv.cells[base + p * h + j]);
                dz[j] = dc * c_g * i_g * (1.0 - i_g);
                dz[h + j] = dc * c_prev * f_g * (1.0 - f_g);
                dz[2 * h + j] = dc * i_g * (1.0 - c_g * c_g);
                dz[3 * h + j] = d_o * o_g * (1.0 - o_g);
                dc_next[ni * h + j] = dc * f_g;
            }
        }
        let dz_t = MatRef::strided(&dz_all[t * g4..], n, g4, frames * g4, 1);
        // dh_{t-1} = dz_t * w_hh
        gemm(1.0, dz_t, MatRef::new(whh, g4, h), 0.0, MatMut::new(&mut dh_next, n, h));
        if let Some(p) = prev {
            gemm(1.0, dz_t.t(), MatRef::strided(&out[p * h..], n, h, frames * h, 1), 1.0, MatMut::new(&mut dwhh, g4, h));
        }
    }
    let rows = n * frames;
    let xd = graph.data(sv.x);
    let wih = graph.data(sv.w_ih);
    s.with(sv.w_hh, |d| d.iter_mut().zip(&dwhh).for_each(|(a, b)| *a += b));
    s.with(sv.b, |db| {
        for row in dz_all.chunks(g4) {
            db.iter_mut().zip(row).for_each(|(a, v)| *a += v);
        }
    });
    s.with(sv.w_ih, |dw| {
        gemm(1.0, MatRef::new(&dz_all, rows, g4).t(), MatRef::new(xd, rows, din), 1.0, MatMut::new(dw, g4, din));
    });
    s.with(sv.x, |dx| {
        gemm(1.0, MatRef::new(&dz_all, rows, g4), MatRef::new(wih, g4, din), 1.0, MatMut::new(dx, rows, din));
    });
}
