//! Layout ops (permute, reshape, concat, chunking) and broadcast products.

use super::graph::{rank3, GradSink, Graph, Op, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Geometry of the 50%-overlapped chunking used by the dual-path stack.
///
/// Frame `t` of the sequence sits at padded position `t + front`; chunk `s`
/// covers padded positions `s * hop .. s * hop + size`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChunkGeometry {
    pub batch: usize,
    pub ch: usize,
    pub len: usize,
    pub size: usize,
    pub hop: usize,
    pub front: usize,
    pub chunks: usize,
    /// Number of chunk slots covering each frame.
    coverage: Vec<usize>,
}

impl ChunkGeometry {
    pub fn new(batch: usize, ch: usize, len: usize, size: usize) -> Result<Self> {
        if size == 0 {
            return Err(Error::invalid("chunk size must be positive"));
        }
        if len < size {
            return Err(Error::invalid(format!("sequence of {len} frames is shorter than chunk size {size}")));
        }
        let hop = (size / 2).max(1);
        let front = hop;
        let mut padded = len + 2 * hop;
        let rem = (padded - size) % hop;
        if rem != 0 {
            padded += hop - rem;
        }
        let chunks = (padded - size) / hop + 1;
        let mut geom = Self { batch, ch, len, size, hop, front, chunks, coverage: vec![0; len] };
        for s in 0..chunks {
            for k in 0..size {
                if let Some(t) = geom.frame(s, k) {
                    geom.coverage[t] += 1;
                }
            }
        }
        Ok(geom)
    }

    #[inline]
    fn frame(&self, s: usize, k: usize) -> Option<usize> {
        let p = s * self.hop + k;
        (p >= self.front && p - self.front < self.len).then(|| p - self.front)
    }

    pub fn coverage(&self) -> &[usize] {
        &self.coverage
    }

    pub fn segmented_shape(&self) -> [usize; 4] {
        [self.batch, self.ch, self.size, self.chunks]
    }
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut st = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        st[i] = st[i + 1] * shape[i + 1];
    }
    st
}

/// For each output position of `permute(axes)`, the source flat index.
fn permute_index(in_shape: &[usize], axes: &[usize]) -> Vec<usize> {
    let in_st = strides(in_shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| in_shape[a]).collect();
    let src_st: Vec<usize> = axes.iter().map(|&a| in_st[a]).collect();
    let n: usize = out_shape.iter().product();
    let mut idx = Vec::with_capacity(n);
    let mut counter = vec![0usize; out_shape.len()];
    let mut src = 0usize;
    for _ in 0..n {
        idx.push(src);
        for d in (0..out_shape.len()).rev() {
            counter[d] += 1;
            src += src_st[d];
            if counter[d] < out_shape[d] {
                break;
            }
            src -= src_st[d] * out_shape[d];
            counter[d] = 0;
        }
    }
    idx
}

impl Graph {
    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if axes.len() != shape.len() || axes.iter().any(|&a| a >= shape.len() || std::mem::replace(&mut seen[a], true)) {
            return Err(Error::shape("permute", format!("axes {axes:?} for shape {shape:?}")));
        }
        let idx = permute_index(&shape, axes);
        let src = self.data(x);
        let d = idx.iter().map(|&i| src[i]).collect();
        let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
        let t = Tensor::new(d, &out_shape)?;
        Ok(self.push_op(t, Op::Permute { x, axes: axes.to_vec() }, &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().with_requires_grad(false);
        let mut t = t.reshaped(shape)?;
        t.grad = None;
        Ok(self.push_op(t, Op::Reshape(x), &[x]))
    }

    pub fn concat_last(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != sb.len() || sa[..sa.len() - 1] != sb[..sb.len() - 1] {
            return Err(Error::shape("concat_last", format!("{sa:?} vs {sb:?}")));
        }
        let (da, db) = (*sa.last().unwrap(), *sb.last().unwrap());
        let mut d = Vec::with_capacity(self.value(a).numel() + self.value(b).numel());
        for (ra, rb) in self.data(a).chunks(da).zip(self.data(b).chunks(db)) {
            d.extend_from_slice(ra);
            d.extend_from_slice(rb);
        }
        let mut shape = sa;
        *shape.last_mut().unwrap() = da + db;
        let t = Tensor::new(d, &shape)?;
        Ok(self.push_op(t, Op::ConcatLast { a, b }, &[a, b]))
    }

    /// Crops or zero-pads the trailing axis to exactly `len`.
    pub fn fit_last(&mut self, x: Var, len: usize) -> Result<Var> {
        let mut shape = self.shape(x).to_vec();
        let cur = *shape.last().unwrap();
        let keep = cur.min(len);
        let mut d = Vec::with_capacity(self.value(x).numel() / cur * len);
        for row in self.data(x).chunks(cur) {
            d.extend_from_slice(&row[..keep]);
            d.extend(std::iter::repeat_n(0.0, len - keep));
        }
        *shape.last_mut().unwrap() = len;
        let t = Tensor::new(d, &shape)?;
        Ok(self.push_op(t, Op::FitLast { x }, &[x]))
    }

    /// `scale[b, c] * x[b, c, t] + shift[b, c]`, broadcast over time.
    pub fn scale_shift_time(&mut self, x: Var, scale: Var, shift: Option<Var>) -> Result<Var> {
        let [b, c, t] = rank3("scale_shift_time", self.shape(x))?;
        let bad = |v: Var| self.shape(v) != [b, c];
        if bad(scale) || shift.is_some_and(bad) {
            return Err(Error::shape(
                "scale_shift_time",
                format!("features {:?} with modulation {:?}", self.shape(x), self.shape(scale)),
            ));
        }
        let sd = self.data(scale);
        let bd = shift.map(|v| self.data(v));
        let d = self
            .data(x)
            .chunks(t)
            .enumerate()
            .flat_map(|(r, row)| {
                let off = bd.map_or(0.0, |bd| bd[r]);
                row.iter().map(move |v| sd[r] * v + off)
            })
            .collect();
        let out = Tensor::new(d, &[b, c, t])?;
        let mut inputs = vec![x, scale];
        inputs.extend(shift);
        Ok(self.push_op(out, Op::ScaleShiftTime { x, scale, shift }, &inputs))
    }

    /// `mask[b, i, ..] * feat[b, ..]`, broadcasting `feat` over axis 1.
    pub fn mask_apply(&mut self, mask: Var, feat: Var) -> Result<Var> {
        let ms = self.shape(mask).to_vec();
        let fs = self.shape(feat).to_vec();
        if ms.len() < 2 || fs.len() != ms.len() - 1 || fs[0] != ms[0] || fs[1..] != ms[2..] {
            return Err(Error::shape("mask_apply", format!("mask {ms:?} against features {fs:?}")));
        }
        let r: usize = fs[1..].iter().product();
        let fd = self.data(feat);
        let d = self
            .data(mask)
            .chunks(r)
            .enumerate()
            .flat_map(|(row, m)| {
                let b = row / ms[1];
                m.iter().zip(&fd[b * r..(b + 1) * r]).map(|(a, f)| a * f)
            })
            .collect();
        let out = Tensor::new(d, &ms)?;
        Ok(self.push_op(out, Op::MaskApply { mask, feat }, &[mask, feat]))
    }

    /// `z[m, c] = sum_t w[m, t] * x[m, c, t]`.
    pub fn weighted_pool_time(&mut self, x: Var, w: Var) -> Result<Var> {
        let [m, c, t] = rank3("weighted_pool_time", self.shape(x))?;
        if self.shape(w) != [m, t] {
            return Err(Error::shape(
                "weighted_pool_time",
                format!("weights {:?} for input {:?}", self.shape(w), self.shape(x)),
            ));
        }
        let wd = self.data(w);
        let d = self
            .data(x)
            .chunks(t)
            .enumerate()
            .map(|(r, row)| {
                let wr = &wd[(r / c) * t..(r / c + 1) * t];
                row.iter().zip(wr).map(|(a, b)| a * b).sum()
            })
            .collect();
        let out = Tensor::new(d, &[m, c])?;
        Ok(self.push_op(out, Op::WeightedPoolTime { x, w }, &[x, w]))
    }

    /// Divides each row of a positive `[m, t]` tensor by its sum.
    pub fn normalize_rows(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(Error::shape("normalize_rows", format!("expected [rows, len], got {s:?}")));
        }
        let d = self
            .data(x)
            .chunks(s[1])
            .flat_map(|row| {
                let tot: f64 = row.iter().sum();
                row.iter().map(move |v| v / tot)
            })
            .collect();
        let out = Tensor::new(d, &s)?;
        Ok(self.push_op(out, Op::NormalizeRows(x), &[x]))
    }

    /// `[batch, ch, len]` to overlapping chunks `[batch, ch, size, chunks]`.
    pub fn segment(&mut self, x: Var, size: usize) -> Result<(Var, ChunkGeometry)> {
        let [b, c, l] = rank3("segment", self.shape(x))?;
        let geom = ChunkGeometry::new(b, c, l, size)?;
        let xd = self.data(x);
        let (k, s_n) = (geom.size, geom.chunks);
        let mut d = vec![0.0; b * c * k * s_n];
        for row in 0..b * c {
            let src = &xd[row * l..(row + 1) * l];
            let dst = &mut d[row * k * s_n..(row + 1) * k * s_n];
            for kk in 0..k {
                for s in 0..s_n {
                    if let Some(t) = geom.frame(s, kk) {
                        dst[kk * s_n + s] = src[t];
                    }
                }
            }
        }
        let out = Tensor::new(d, &geom.segmented_shape())?;
        let v = self.push_op(out, Op::Segment { x, geom: geom.clone() }, &[x]);
        Ok((v, geom))
    }

    /// Inverse of [`Graph::segment`]: sums overlapping chunk slots and divides
    /// by the coverage count, so the per-frame weights sum to one.
    pub fn overlap_add(&mut self, x: Var, geom: &ChunkGeometry) -> Result<Var> {
        if self.shape(x) != geom.segmented_shape() {
            return Err(Error::shape(
                "overlap_add",
                format!("{:?} vs chunk layout {:?}", self.shape(x), geom.segmented_shape()),
            ));
        }
        let (l, k, s_n) = (geom.len, geom.size, geom.chunks);
        let xd = self.data(x);
        let mut d = vec![0.0; geom.batch * geom.ch * l];
        for row in 0..geom.batch * geom.ch {
            let src = &xd[row * k * s_n..(row + 1) * k * s_n];
            let dst = &mut d[row * l..(row + 1) * l];
            for kk in 0..k {
                for s in 0..s_n {
                    if let Some(t) = geom.frame(s, kk) {
                        dst[t] += src[kk * s_n + s];
                    }
                }
            }
            dst.iter_mut().zip(&geom.coverage).for_each(|(v, &c)| *v /= c as f64);
        }
        let out = Tensor::new(d, &[geom.batch, geom.ch, l])?;
        Ok(self.push_op(out, Op::OverlapAdd { x, geom: geom.clone() }, &[x]))
    }
}

pub(crate) fn permute_backward(s: &mut GradSink<'_>, x: Var, axes: &[usize], g: &[f64]) {
    let idx = permute_index(s.graph.shape(x), axes);
    s.with(x, |dx| {
        for (gi, &i) in g.iter().zip(&idx) {
            dx[i] += gi;
        }
    });
}

pub(crate) fn concat_last_backward(s: &mut GradSink<'_>, a: Var, b: Var, g: &[f64]) {
    let da = *s.graph.shape(a).last().unwrap();
    let db = *s.graph.shape(b).last().unwrap();
    s.with(a, |buf| {
        for (dst, row) in buf.chunks_mut(da).zip(g.chunks(da + db)) {
            dst.iter_mut().zip(&row[..da]).for_each(|(o, v)| *o += v);
        }
    });
    s.with(b, |buf| {
        for (dst, row) in buf.chunks_mut(db).zip(g.chunks(da + db)) {
            dst.iter_mut().zip(&row[da..]).for_each(|(o, v)| *o += v);
        }
    });
}

pub(crate) fn fit_last_backward(s: &mut GradSink<'_>, x: Var, out_shape: &[usize], g: &[f64]) {
    let cur = *s.graph.shape(x).last().unwrap();
    let len = *out_shape.last().unwrap();
    let keep = cur.min(len);
    s.with(x, |dx| {
        for (dst, row) in dx.chunks_mut(cur).zip(g.chunks(len)) {
            dst[..keep].iter_mut().zip(&row[..keep]).for_each(|(o, v)| *o += v);
        }
    });
}

pub(crate) fn scale_shift_time_backward(s: &mut GradSink<'_>, x: Var, scale: Var, shift: Option<Var>, g: &[f64]) {
    let graph = s.graph;
    let t = graph.shape(x)[2];
    let xd = graph.data(x);
    let sd = graph.data(scale);
    s.with(x, |dx| {
        for (r, (dst, row)) in dx.chunks_mut(t).zip(g.chunks(t)).enumerate() {
            dst.iter_mut().zip(row).for_each(|(o, v)| *o += sd[r] * v);
        }
    });
    s.with(scale, |ds| {
        for (r, (xr, row)) in xd.chunks(t).zip(g.chunks(t)).enumerate() {
            ds[r] += xr.iter().zip(row).map(|(a, b)| a * b).sum::<f64>();
        }
    });
    if let Some(shift) = shift {
        s.with(shift, |db| {
            for (r, row) in g.chunks(t).enumerate() {
                db[r] += row.iter().sum::<f64>();
            }
        });
    }
}

pub(crate) fn mask_apply_backward(s: &mut GradSink<'_>, mask: Var, feat: Var, g: &[f64]) {
    let graph = s.graph;
    let n_src = graph.shape(mask)[1];
    let fs = graph.shape(feat);
    let r: usize = fs[1..].iter().product();
    let md = graph.data(mask);
    let fd = graph.data(feat);
    s.with(mask, |dm| {
        for (row, (dst, gr)) in dm.chunks_mut(r).zip(g.chunks(r)).enumerate() {
            let b = row / n_src;
            let f = &fd[b * r..(b + 1) * r];
            for ((o, gi), fv) in dst.iter_mut().zip(gr).zip(f) {
                *o += gi * fv;
            }
        }
    });
    s.with(feat, |df| {
        for (row, (mr, gr)) in md.chunks(r).zip(g.chunks(r)).enumerate() {
            let b = row / n_src;
            let dst = &mut df[b * r..(b + 1) * r];
            for ((o, gi), mv) in dst.iter_mut().zip(gr).zip(mr) {
                *o += gi * mv;
            }
        }
    });
}

pub(crate) fn weighted_pool_backward(s: &mut GradSink<'_>, x: Var, w: Var, g: &[f64]) {
    let graph = s.graph;
    let [_, c, t] = <[usize; 3]>::try_from(graph.shape(x)).unwrap();
    let xd = graph.data(x);
    let wd = graph.data(w);
    s.with(x, |dx| {
        for (r, (dst, gi)) in dx.chunks_mut(t).zip(g).enumerate() {
            let wr = &wd[(r / c) * t..(r / c + 1) * t];
            dst.iter_mut().zip(wr).for_each(|(o, wv)| *o += gi * wv);
        }
    });
    s.with(w, |dw| {
        for (r, (xr, gi)) in xd.chunks(t).zip(g).enumerate() {
            let dst = &mut dw[(r / c) * t..(r / c + 1) * t];
            dst.iter_mut().zip(xr).for_each(|(o, xv)| *o += gi * xv);
        }
    });
}

pub(crate) fn normalize_rows_backward(s: &mut GradSink<'_>, x: Var, out: &[f64], g: &[f64]) {
    let graph = s.graph;
    let t = graph.shape(x)[1];
    let xd = graph.data(x);
    s.with(x, |dx| {
        for ((dst, (yr, gr)), xr) in dx.chunks_mut(t).zip(out.chunks(t).zip(g.chunks(t))).zip(xd.chunks(t)) {
            let tot: f64 = xr.iter().sum();
            let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
            dst.iter_mut().zip(gr).for_each(|(o, gv)| *o += (gv - dot) / tot);
        }
    });
}

pub(crate) fn segment_backward(s: &mut GradSink<'_>, x: Var, geom: &ChunkGeometry, g: &[f64]) {
    let (l, k, s_n) = (geom.len, geom.size, geom.chunks);
    s.with(x, |dx| {
        for row in 0..geom.batch * geom.ch {
            let src = &g[row * k * s_n..(row + 1) * k * s_n];
            let dst = &mut dx[row * l..(row + 1) * l];
            for kk in 0..k {
                for sc in 0..s_n {
                    if let Some(t) = geom.frame(sc, kk) {
                        dst[t] += src[kk * s_n + sc];
                    }
                }
            }
        }
    });
}

pub(crate) fn overlap_add_backward(s: &mut GradSink<'_>, x: Var, geom: &ChunkGeometry, g: &[f64]) {
    let (l, k, s_n) = (geom.len, geom.size, geom.chunks);
    s.with(x, |dx| {
        for row in 0..geom.batch * geom.ch {
            let src = &g[row * l..(row + 1) * l];
            let dst = &mut dx[row * k * s_n..(row + 1) * k * s_n];
            for kk in 0..k {
                for sc in 0..s_n {
                    if let Some(t) = geom.frame(sc, kk) {
                        dst[kk * s_n + sc] += src[t] / geom.coverage[t] as f64;
                    }
                }
            }
        }
    });
}
