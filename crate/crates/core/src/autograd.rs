//! Tape-based reverse-mode differentiation over a closed set of
//! matrix-valued operations.
//!
//! Every value on a [`Tape`] is a dense row-major `rows x cols` block stored
//! in a single arena. Entries are appended in evaluation order, so inputs
//! always precede their consumers and [`Tape::backward`] only has to walk
//! the entries once, in reverse. Parameter reads go through dedicated ops
//! (`Lookup`, `Compose`, `Decompose`, `DembedNll`) whose adjoints write into
//! a [`ParamGrads`] accumulator instead of the arena.
//!
//! Tree selection never appears on a tape: callers decide the structure
//! first and then replay the chosen merges, so the argmax over cosines is
//! a constant as far as differentiation is concerned.

use std::collections::BTreeMap;
use std::fmt;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{ModelParams, ParamTensor};

/// Handle to a value on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum OpKind {
    Input,
    Lookup,
    MaskMul,
    Compose,
    Decompose,
    Slice,
    Stack,
    NormalizeRows,
    Gram,
    TemperedNll,
    DembedNll,
    Sum,
    Scale,
    Add,
    Mul,
}

impl OpKind {
    /// Every differentiable op (excludes `Input`).
    pub const DIFFERENTIABLE: [OpKind; 14] = [
        OpKind::Lookup,
        OpKind::MaskMul,
        OpKind::Compose,
        OpKind::Decompose,
        OpKind::Slice,
        OpKind::Stack,
        OpKind::NormalizeRows,
        OpKind::Gram,
        OpKind::TemperedNll,
        OpKind::DembedNll,
        OpKind::Sum,
        OpKind::Scale,
        OpKind::Add,
        OpKind::Mul,
    ];
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

impl std::str::FromStr for OpKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        OpKind::DIFFERENTIABLE
            .into_iter()
            .find(|k| k.to_string().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown op `{s}`")))
    }
}

/// Which index the softmax normalizes over.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    /// Softmax across each row; one target column per row.
    Rows,
    /// Softmax down each column; one target row per column.
    Cols,
}

#[derive(Debug, Clone)]
enum Op {
    Input,
    Lookup { token: usize },
    MaskMul { x: Var, mask: Vec<f64> },
    Compose { left: Var, right: Var },
    Decompose { parent: Var },
    Slice { x: Var, start: usize },
    Stack { parts: Vec<Var> },
    NormalizeRows { x: Var, norms: Vec<f64> },
    Gram { a: Var, b: Var },
    TemperedNll { x: Var, tau: f64, axis: Axis, targets: Vec<usize> },
    DembedNll { x: Var, targets: Vec<usize> },
    Sum { x: Var },
    Scale { x: Var, factor: f64 },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Input => OpKind::Input,
            Op::Lookup { .. } => OpKind::Lookup,
            Op::MaskMul { .. } => OpKind::MaskMul,
            Op::Compose { .. } => OpKind::Compose,
            Op::Decompose { .. } => OpKind::Decompose,
            Op::Slice { .. } => OpKind::Slice,
            Op::Stack { .. } => OpKind::Stack,
            Op::NormalizeRows { .. } => OpKind::NormalizeRows,
            Op::Gram { .. } => OpKind::Gram,
            Op::TemperedNll { .. } => OpKind::TemperedNll,
            Op::DembedNll { .. } => OpKind::DembedNll,
            Op::Sum { .. } => OpKind::Sum,
            Op::Scale { .. } => OpKind::Scale,
            Op::Add { .. } => OpKind::Add,
            Op::Mul { .. } => OpKind::Mul,
        }
    }
}

#[derive(Debug, Clone)]
struct Entry {
    offset: usize,
    rows: usize,
    cols: usize,
    op: Op,
}

impl Entry {
    fn len(&self) -> usize {
        self.rows * self.cols
    }

    fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Parameter gradients. Embedding rows are kept sparse since a sentence
/// touches only a handful of them.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads {
    dim: usize,
    vocab_size: usize,
    pub embedding_rows: BTreeMap<usize, Vec<f64>>,
    pub compose_weight: Vec<f64>,
    pub compose_bias: Vec<f64>,
    pub decompose_weight: Vec<f64>,
    pub decompose_bias: Vec<f64>,
    pub dembedding: Option<Vec<f64>>,
}

impl ParamGrads {
    /// Gradients for a detached tape, which touches no parameters.
    pub fn empty() -> Self {
        ParamGrads {
            dim: 0,
            vocab_size: 0,
            embedding_rows: BTreeMap::new(),
            compose_weight: Vec::new(),
            compose_bias: Vec::new(),
            decompose_weight: Vec::new(),
            decompose_bias: Vec::new(),
            dembedding: None,
        }
    }

    pub fn new(params: &ModelParams) -> Self {
        let u = params.channel_width();
        ParamGrads {
            dim: params.dim(),
            vocab_size: params.vocab_size(),
            embedding_rows: BTreeMap::new(),
            compose_weight: vec![0.0; 2 * u * u],
            compose_bias: vec![0.0; u],
            decompose_weight: vec![0.0; 2 * u * u],
            decompose_bias: vec![0.0; 2 * u],
            dembedding: None,
        }
    }

    fn embedding_row_mut(&mut self, token: usize) -> &mut [f64] {
        let dim = self.dim;
        self.embedding_rows.entry(token).or_insert_with(|| vec![0.0; dim])
    }

    fn dembedding_mut(&mut self) -> &mut [f64] {
        let n = self.dim * self.vocab_size;
        self.dembedding.get_or_insert_with(|| vec![0.0; n])
    }

    /// `self += other`.
    pub fn accumulate(&mut self, other: &ParamGrads) {
        for (&row, g) in &other.embedding_rows {
            add_into(self.embedding_row_mut(row), g);
        }
        add_into(&mut self.compose_weight, &other.compose_weight);
        add_into(&mut self.compose_bias, &other.compose_bias);
        add_into(&mut self.decompose_weight, &other.decompose_weight);
        add_into(&mut self.decompose_bias, &other.decompose_bias);
        if let Some(g) = &other.dembedding {
            add_into(self.dembedding_mut(), g);
        }
    }

    /// Dense gradient with the same layout as `params`.
    pub fn to_dense(&self, params: &ModelParams) -> ModelParams {
        let mut dense = params.zeros_like();
        let e = self.dim;
        for (&row, g) in &self.embedding_rows {
            add_into(&mut dense.embedding[row * e..(row + 1) * e], g);
        }
        dense.compose_weight.copy_from_slice(&self.compose_weight);
        dense.compose_bias.copy_from_slice(&self.compose_bias);
        dense.decompose_weight.copy_from_slice(&self.decompose_weight);
        dense.decompose_bias.copy_from_slice(&self.decompose_bias);
        if let (Some(d), Some(g)) = (dense.dembedding.as_mut(), &self.dembedding) {
            d.copy_from_slice(g);
        }
        dense
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Result of a backward pass.
#[derive(Debug, Clone)]
pub struct Gradients {
    values: Vec<f64>,
    ranges: Vec<std::ops::Range<usize>>,
    pub params: ParamGrads,
}

impl Gradients {
    /// Gradient with respect to any value on the tape.
    pub fn wrt(&self, var: Var) -> &[f64] {
        &self.values[self.ranges[var.0].clone()]
    }
}

/// Records one dynamic computation graph.
pub struct Tape<'p> {
    params: Option<&'p ModelParams>,
    values: Vec<f64>,
    entries: Vec<Entry>,
    fault: Option<OpKind>,
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ModelParams) -> Self {
        Tape {
            params: Some(params),
            values: Vec::new(),
            entries: Vec::new(),
            fault: None,
        }
    }

    /// A tape without model parameters; only the parameter-free ops work.
    pub fn detached() -> Self {
        Tape {
            params: None,
            values: Vec::new(),
            entries: Vec::new(),
            fault: None,
        }
    }

    fn bound(&self) -> Result<&'p ModelParams> {
        self.params
            .ok_or_else(|| Error::Autograd("parameter op on a detached tape".into()))
    }

    /// Negates the adjoint of one op kind. Only useful for testing the checkers.
    pub fn with_fault(mut self, fault: Option<OpKind>) -> Self {
        self.fault = fault;
        self
    }

    pub fn params(&self) -> Option<&'p ModelParams> {
        self.params
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn value(&self, var: Var) -> &[f64] {
        &self.values[self.entries[var.0].range()]
    }

    pub fn shape(&self, var: Var) -> (usize, usize) {
        let e = &self.entries[var.0];
        (e.rows, e.cols)
    }

    pub fn scalar(&self, var: Var) -> Result<f64> {
        match self.shape(var) {
            (1, 1) => Ok(self.value(var)[0]),
            (r, c) => Err(Error::Autograd(format!("expected a scalar, found {r}x{c}"))),
        }
    }

    fn push(&mut self, rows: usize, cols: usize, data: Vec<f64>, op: Op) -> Var {
        debug_assert_eq!(data.len(), rows * cols);
        let offset = self.values.len();
        self.values.extend_from_slice(&data);
        self.entries.push(Entry { offset, rows, cols, op });
        Var(self.entries.len() - 1)
    }

    fn push_with(&mut self, rows: usize, cols: usize, op: Op, fill: impl FnOnce(&[f64], &mut [f64])) -> Var {
        let offset = self.values.len();
        self.values.resize(offset + rows * cols, 0.0);
        let (before, out) = self.values.split_at_mut(offset);
        fill(before, out);
        self.entries.push(Entry { offset, rows, cols, op });
        Var(self.entries.len() - 1)
    }

    fn row_vector(&self, var: Var, len: usize, what: &str) -> Result<()> {
        match self.shape(var) {
            (1, c) if c == len => Ok(()),
            (r, c) => Err(Error::shape(format!("{what}: 1x{len}"), format!("{r}x{c}"))),
        }
    }

    pub fn input(&mut self, rows: usize, cols: usize, data: Vec<f64>) -> Result<Var> {
        if data.len() != rows * cols {
            return Err(Error::shape(format!("{rows}x{cols} input"), data.len()));
        }
        Ok(self.push(rows, cols, data, Op::Input))
    }

    /// A row of the embedding table.
    pub fn lookup(&mut self, token: usize) -> Result<Var> {
        let p = self.bound()?;
        if token >= p.vocab_size() {
            return Err(Error::Vocabulary {
                id: token,
                vocab_size: p.vocab_size(),
            });
        }
        let row = p.embedding_row(token).to_vec();
        Ok(self.push(1, p.dim(), row, Op::Lookup { token }))
    }

    /// Elementwise product with a constant mask.
    pub fn mask_mul(&mut self, x: Var, mask: Vec<f64>) -> Result<Var> {
        let (r, c) = self.shape(x);
        if mask.len() != r * c {
            return Err(Error::shape(format!("mask of {}", r * c), mask.len()));
        }
        let data = self.value(x).iter().zip(&mask).map(|(a, m)| a * m).collect();
        Ok(self.push(r, c, data, Op::MaskMul { x, mask }))
    }

    pub fn compose(&mut self, left: Var, right: Var) -> Result<Var> {
        let p = self.bound()?;
        let e = p.dim();
        self.row_vector(left, e, "compose left")?;
        self.row_vector(right, e, "compose right")?;
        let (lr, rr) = (self.entries[left.0].range(), self.entries[right.0].range());
        Ok(self.push_with(1, e, Op::Compose { left, right }, |vals, out| {
            p.compose_into(&vals[lr], &vals[rr], out)
        }))
    }

    /// Returns the (left, right) children of a parent embedding.
    pub fn decompose(&mut self, parent: Var) -> Result<(Var, Var)> {
        let p = self.bound()?;
        let e = p.dim();
        self.row_vector(parent, e, "decompose parent")?;
        let pr = self.entries[parent.0].range();
        let both = self.push_with(1, 2 * e, Op::Decompose { parent }, |vals, out| {
            let (l, r) = out.split_at_mut(e);
            p.decompose_into(&vals[pr], l, r)
        });
        Ok((self.slice(both, 0, e)?, self.slice(both, e, e)?))
    }

    /// A contiguous run of a row vector.
    pub fn slice(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.shape(x);
        if r != 1 || start + len > c {
            return Err(Error::shape(format!("1xN with N >= {}", start + len), format!("{r}x{c}")));
        }
        let data = self.value(x)[start..start + len].to_vec();
        Ok(self.push(1, len, data, Op::Slice { x, start }))
    }

    /// Concatenates blocks with equal column counts along rows.
    pub fn stack(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = parts.first().map(|&v| self.shape(v).1).unwrap_or(0);
        let mut rows = 0;
        let mut data = Vec::new();
        for &v in parts {
            let (r, c) = self.shape(v);
            if c != cols {
                return Err(Error::shape(format!("{cols} columns"), c));
            }
            rows += r;
            data.extend_from_slice(self.value(v));
        }
        Ok(self.push(rows, cols, data, Op::Stack { parts: parts.to_vec() }))
    }

    /// Scales every row to unit L2 norm; all-zero rows stay zero.
    pub fn normalize_rows(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.shape(x);
        let mut data = self.value(x).to_vec();
        let mut norms = Vec::with_capacity(r);
        for row in data.chunks_mut(c.max(1)).take(r) {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n > 0.0 {
                row.iter_mut().for_each(|v| *v /= n);
            }
            norms.push(n);
        }
        Ok(self.push(r, c, data, Op::NormalizeRows { x, norms }))
    }

    /// `a * b^T`.
    pub fn gram(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, d) = self.shape(a);
        let (m, d2) = self.shape(b);
        if d != d2 {
            return Err(Error::shape(format!("{d} columns"), d2));
        }
        let (ar, br) = (self.entries[a.0].range(), self.entries[b.0].range());
        Ok(self.push_with(n, m, Op::Gram { a, b }, |vals, out| {
            // out (n x m) = a (n x d) * b^T, reading b with swapped strides.
            gemm(n, d, m, (&vals[ar], d, 1), (&vals[br], 1, d), out, 0.0);
        }))
    }

    /// Per row (or column) negative log of the tempered softmax probability
    /// of the target entry: `-log softmax(x / tau)[target]`.
    pub fn tempered_nll(&mut self, x: Var, tau: f64, axis: Axis, targets: Vec<usize>) -> Result<Var> {
        let (r, c) = self.shape(x);
        let (lines, width) = match axis {
            Axis::Rows => (r, c),
            Axis::Cols => (c, r),
        };
        if targets.len() != lines || targets.iter().any(|&t| t >= width) {
            return Err(Error::shape(format!("{lines} targets below {width}"), targets.len()));
        }
        if !(tau > 0.0) {
            return Err(Error::Config(format!("temperature must be positive, got {tau}")));
        }
        let xv = self.value(x);
        let mut line = vec![0.0; width];
        let mut data = Vec::with_capacity(lines);
        for (l, &t) in targets.iter().enumerate() {
            gather_line(xv, r, c, axis, l, &mut line);
            data.push(log_sum_exp(&line, tau) - line[t] / tau);
        }
        Ok(self.push(1, lines, data, Op::TemperedNll { x, tau, axis, targets }))
    }

    /// Per row of `x` (`n x E`), `-log softmax(dembed(x_r))[target_r]`.
    /// The `n x V` logits are recomputed in the backward pass rather than stored.
    pub fn dembed_nll(&mut self, x: Var, targets: Vec<usize>) -> Result<Var> {
        let p = self.bound()?;
        let (n, e) = self.shape(x);
        if e != p.dim() || targets.len() != n {
            return Err(Error::shape(format!("{} rows of width {}", targets.len(), p.dim()), format!("{n}x{e}")));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= p.vocab_size()) {
            return Err(Error::Vocabulary {
                id: bad,
                vocab_size: p.vocab_size(),
            });
        }
        let xv = self.value(x);
        let mut logits = vec![0.0; p.vocab_size()];
        let mut data = Vec::with_capacity(n);
        for (r, &t) in targets.iter().enumerate() {
            p.dembed_into(&xv[r * e..(r + 1) * e], &mut logits);
            data.push(log_sum_exp(&logits, 1.0) - logits[t]);
        }
        Ok(self.push(1, n, data, Op::DembedNll { x, targets }))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().sum();
        self.push(1, 1, vec![s], Op::Sum { x })
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let (r, c) = self.shape(x);
        let data = self.value(x).iter().map(|v| v * factor).collect();
        self.push(r, c, data, Op::Scale { x, factor })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b)?;
        let (r, c) = self.shape(a);
        let data = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        Ok(self.push(r, c, data, Op::Add { a, b }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b)?;
        let (r, c) = self.shape(a);
        let data = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).collect();
        Ok(self.push(r, c, data, Op::Mul { a, b }))
    }

    fn same_shape(&self, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::shape(format!("{}x{}", sa.0, sa.1), format!("{}x{}", sb.0, sb.1)));
        }
        Ok(())
    }

    /// Gradient of a scalar loss with respect to everything on the tape.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.shape(loss) != (1, 1) {
            let (r, c) = self.shape(loss);
            return Err(Error::Autograd(format!("backward needs a scalar loss, got {r}x{c}")));
        }
        self.backward_seeded(&[(loss, &[1.0][..])])
    }

    /// Reverse pass starting from arbitrary upstream gradients. Seeds on the
    /// same value accumulate.
    pub fn backward_seeded(&self, seeds: &[(Var, &[f64])]) -> Result<Gradients> {
        let mut grads = vec![0.0; self.values.len()];
        for &(var, seed) in seeds {
            let range = self.entries[var.0].range();
            if seed.len() != range.len() {
                return Err(Error::shape(format!("seed of {}", range.len()), seed.len()));
            }
            add_into(&mut grads[range], seed);
        }
        let mut pg = self.params.map(ParamGrads::new).unwrap_or_else(ParamGrads::empty);
        let mut scratch = Vec::new();
        for entry in self.entries.iter().rev() {
            if matches!(entry.op, Op::Input) {
                continue;
            }
            let (lower, upper) = grads.split_at_mut(entry.offset);
            let g = &mut upper[..entry.len()];
            if g.iter().all(|&x| x == 0.0) {
                continue;
            }
            if self.fault == Some(entry.op.kind()) {
                g.iter_mut().for_each(|x| *x = -*x);
            }
            self.adjoint(entry, g, lower, &mut pg, &mut scratch);
        }
        Ok(Gradients {
            values: grads,
            ranges: self.entries.iter().map(Entry::range).collect(),
            params: pg,
        })
    }

    fn adjoint(&self, entry: &Entry, g: &[f64], gin: &mut [f64], pg: &mut ParamGrads, scratch: &mut Vec<f64>) {
        let bound = || self.params.expect("parameter ops are only recorded on bound tapes");
        let vals = &self.values;
        let range = |v: &Var| self.entries[v.0].range();
        match &entry.op {
            Op::Input => {}
            Op::Lookup { token } => add_into(pg.embedding_row_mut(*token), g),
            Op::MaskMul { x, mask } => {
                for ((d, gi), m) in gin[range(x)].iter_mut().zip(g).zip(mask) {
                    *d += gi * m;
                }
            }
            Op::Compose { left, right } => {
                let p = bound();
                let u = p.channel_width();
                let w = &p.compose_weight;
                for (side, var) in [(0, left), (u, right)] {
                    let xr = range(var);
                    for c in 0..p.channels() {
                        let gc = &g[c * u..(c + 1) * u];
                        let xc = &vals[xr.start + c * u..xr.start + (c + 1) * u];
                        for i in 0..u {
                            let wrow = &w[(side + i) * u..(side + i + 1) * u];
                            gin[xr.start + c * u + i] += crate::model::dot(wrow, gc);
                            let gw = &mut pg.compose_weight[(side + i) * u..(side + i + 1) * u];
                            for (gwj, gj) in gw.iter_mut().zip(gc) {
                                *gwj += xc[i] * gj;
                            }
                        }
                    }
                }
                for c in 0..p.channels() {
                    add_into(&mut pg.compose_bias, &g[c * u..(c + 1) * u]);
                }
            }
            Op::Decompose { parent } => {
                let p = bound();
                let u = p.channel_width();
                let e = p.dim();
                let w = &p.decompose_weight;
                let pr = range(parent);
                scratch.resize(2 * u, 0.0);
                for c in 0..p.channels() {
                    scratch[..u].copy_from_slice(&g[c * u..(c + 1) * u]);
                    scratch[u..].copy_from_slice(&g[e + c * u..e + (c + 1) * u]);
                    add_into(&mut pg.decompose_bias, scratch);
                    for i in 0..u {
                        let xi = vals[pr.start + c * u + i];
                        let wrow = &w[i * 2 * u..(i + 1) * 2 * u];
                        gin[pr.start + c * u + i] += crate::model::dot(wrow, scratch);
                        for (gwj, gj) in pg.decompose_weight[i * 2 * u..(i + 1) * 2 * u].iter_mut().zip(scratch.iter()) {
                            *gwj += xi * gj;
                        }
                    }
                }
            }
            Op::Slice { x, start } => {
                let s = range(x).start + start;
                add_into(&mut gin[s..s + g.len()], g);
            }
            Op::Stack { parts } => {
                let mut at = 0;
                for v in parts {
                    let r = range(v);
                    add_into(&mut gin[r.clone()], &g[at..at + r.len()]);
                    at += r.len();
                }
            }
            Op::NormalizeRows { x, norms } => {
                let c = entry.cols;
                let xr = range(x);
                let y = &vals[entry.range()];
                for (i, &n) in norms.iter().enumerate() {
                    if n == 0.0 {
                        continue;
                    }
                    let (yi, gi) = (&y[i * c..(i + 1) * c], &g[i * c..(i + 1) * c]);
                    let proj = crate::model::dot(yi, gi);
                    for j in 0..c {
                        gin[xr.start + i * c + j] += (gi[j] - yi[j] * proj) / n;
                    }
                }
            }
            Op::Gram { a, b } => {
                let (n, m) = (entry.rows, entry.cols);
                let (ar, br) = (range(a), range(b));
                let d = ar.len() / n.max(1);
                // da += g * b and db += g^T * a.
                gemm(n, m, d, (g, m, 1), (&vals[br.clone()], d, 1), &mut gin[ar.clone()], 1.0);
                gemm(m, n, d, (g, 1, m), (&vals[ar], d, 1), &mut gin[br], 1.0);
            }
            Op::TemperedNll { x, tau, axis, targets } => {
                let xr = range(x);
                let (r, c) = self.shape(*x);
                let xv = &vals[xr.clone()];
                let width = if *axis == Axis::Rows { c } else { r };
                scratch.resize(width, 0.0);
                for (l, &t) in targets.iter().enumerate() {
                    if g[l] == 0.0 {
                        continue;
                    }
                    gather_line(xv, r, c, *axis, l, scratch);
                    softmax_in_place(scratch, *tau);
                    scratch[t] -= 1.0;
                    for (w, s) in scratch.iter().enumerate() {
                        let idx = match axis {
                            Axis::Rows => l * c + w,
                            Axis::Cols => w * c + l,
                        };
                        gin[xr.start + idx] += g[l] * s / tau;
                    }
                }
            }
            Op::DembedNll { x, targets } => {
                let p = bound();
                let e = p.dim();
                let v = p.vocab_size();
                let xr = range(x);
                scratch.resize(v, 0.0);
                for (row, &t) in targets.iter().enumerate() {
                    if g[row] == 0.0 {
                        continue;
                    }
                    let xrow = &vals[xr.start + row * e..xr.start + (row + 1) * e];
                    p.dembed_into(xrow, scratch);
                    softmax_in_place(scratch, 1.0);
                    scratch[t] -= 1.0;
                    scratch.iter_mut().for_each(|s| *s *= g[row]);
                    let gx = &mut gin[xr.start + row * e..xr.start + (row + 1) * e];
                    match &p.dembedding {
                        Some(gamma) => {
                            let gg = pg.dembedding_mut();
                            for i in 0..e {
                                gx[i] += crate::model::dot(&gamma[i * v..(i + 1) * v], scratch);
                                for (gv, s) in gg[i * v..(i + 1) * v].iter_mut().zip(scratch.iter()) {
                                    *gv += xrow[i] * s;
                                }
                            }
                        }
                        None => {
                            for (tok, &s) in scratch.iter().enumerate() {
                                if s == 0.0 {
                                    continue;
                                }
                                for (gxi, ei) in gx.iter_mut().zip(p.embedding_row(tok)) {
                                    *gxi += s * ei;
                                }
                                for (gi, xi) in pg.embedding_row_mut(tok).iter_mut().zip(xrow) {
                                    *gi += s * xi;
                                }
                            }
                        }
                    }
                }
            }
            Op::Sum { x } => gin[range(x)].iter_mut().for_each(|d| *d += g[0]),
            Op::Scale { x, factor } => {
                for (d, gi) in gin[range(x)].iter_mut().zip(g) {
                    *d += gi * factor;
                }
            }
            Op::Add { a, b } => {
                add_into(&mut gin[range(a)], g);
                add_into(&mut gin[range(b)], g);
            }
            Op::Mul { a, b } => {
                let (ar, br) = (range(a), range(b));
                for (i, gi) in g.iter().enumerate() {
                    let (av, bv) = (vals[ar.start + i], vals[br.start + i]);
                    gin[ar.start + i] += gi * bv;
                    gin[br.start + i] += gi * av;
                }
            }
        }
    }
}

fn gather_line(x: &[f64], rows: usize, cols: usize, axis: Axis, l: usize, out: &mut [f64]) {
    match axis {
        Axis::Rows => out.copy_from_slice(&x[l * cols..(l + 1) * cols]),
        Axis::Cols => {
            for (i, o) in out.iter_mut().enumerate().take(rows) {
                *o = x[i * cols + l];
            }
        }
    }
}

/// `log sum exp(x / tau)` with max subtraction.
pub(crate) fn log_sum_exp(x: &[f64], tau: f64) -> f64 {
    let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max) / tau;
    let s: f64 = x.iter().map(|v| (v / tau - max).exp()).sum();
    max + s.ln()
}

fn softmax_in_place(x: &mut [f64], tau: f64) {
    let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max) / tau;
    let mut s = 0.0;
    for v in x.iter_mut() {
        *v = (*v / tau - max).exp();
        s += *v;
    }
    x.iter_mut().for_each(|v| *v /= s);
}

/// One parameter entry whose analytic and numeric gradients disagree.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FailingEntry {
    pub tensor: ParamTensor,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub checked: usize,
    pub failing: Vec<FailingEntry>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failing.is_empty()
    }
}

/// Central-difference check of every parameter entry.
///
/// `loss` must be deterministic and return the loss together with its dense
/// analytic gradient. The relative error of an entry is
/// `|analytic - numeric| / max(1, |numeric|)`.
pub fn grad_check<F>(params: &ModelParams, h: f64, tol: f64, loss: F) -> Result<GradCheckReport>
where
    F: Fn(&ModelParams) -> Result<(f64, ModelParams)>,
{
    let (base, analytic) = loss(params)?;
    if !base.is_finite() {
        return Err(Error::Numeric("non-finite loss at the unperturbed point".into()));
    }
    let mut probe = params.clone();
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        checked: 0,
        failing: Vec::new(),
    };
    for tensor in ParamTensor::ALL {
        let Some(ana) = analytic.tensor(tensor) else { continue };
        for index in 0..ana.len() {
            let orig = params.tensor(tensor).expect("same layout")[index];
            probe.tensor_mut(tensor).expect("same layout")[index] = orig + h;
            let (plus, _) = loss(&probe)?;
            probe.tensor_mut(tensor).expect("same layout")[index] = orig - h;
            let (minus, _) = loss(&probe)?;
            probe.tensor_mut(tensor).expect("same layout")[index] = orig;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite loss when perturbing {tensor}[{index}]"
                )));
            }
            let numeric = (plus - minus) / (2.0 * h);
            let rel_err = (ana[index] - numeric).abs() / numeric.abs().max(1.0);
            report.checked += 1;
            report.max_rel_err = report.max_rel_err.max(rel_err);
            if rel_err > tol {
                report.failing.push(FailingEntry {
                    tensor,
                    index,
                    analytic: ana[index],
                    numeric,
                    rel_err,
                });
            }
        }
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OpCheck {
    pub op: OpKind,
    pub max_rel_err: f64,
    pub passed: bool,
}

/// Checks each op's adjoint in isolation against central differences.
///
/// Each op is evaluated on random inputs and seeded with a random upstream
/// gradient, so the only adjoint exercised is the op's own. With `fault`
/// set, that op's adjoint is negated and its check is expected to fail.
pub fn check_op_adjoints(seed: u64, h: f64, tol: f64, fault: Option<OpKind>) -> Result<Vec<OpCheck>> {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = crate::model::ModelConfig::new(5, 2, 3)?;
    let untied = ModelParams::new(&cfg, seed)?;
    let tied = ModelParams::new(&cfg.clone().with_tied(true), seed)?;
    let e = cfg.dim;

    type Build = fn(&mut Tape<'_>, &[Var]) -> Result<Var>;
    let cases: Vec<(OpKind, Vec<(usize, usize)>, Build, bool)> = vec![
        (OpKind::Lookup, vec![], |t, _| t.lookup(3), false),
        (OpKind::MaskMul, vec![(2, 3)], |t, x| t.mask_mul(x[0], vec![0.5, 2.0, 0.0, 1.0, -1.5, 3.0]), false),
        (OpKind::Compose, vec![(1, e), (1, e)], |t, x| t.compose(x[0], x[1]), false),
        (OpKind::Decompose, vec![(1, e)], |t, x| {
            // Seed the raw Decompose entry, not the two slices behind it.
            t.decompose(x[0])?;
            Ok(Var(t.len() - 3))
        }, false),
        (OpKind::Slice, vec![(1, 7)], |t, x| t.slice(x[0], 2, 4), false),
        (OpKind::Stack, vec![(1, 4), (2, 4)], |t, x| t.stack(&[x[0], x[1]]), false),
        (OpKind::NormalizeRows, vec![(3, 4)], |t, x| t.normalize_rows(x[0]), false),
        (OpKind::Gram, vec![(3, 4), (2, 4)], |t, x| t.gram(x[0], x[1]), false),
        (OpKind::TemperedNll, vec![(3, 3)], |t, x| t.tempered_nll(x[0], 1.3, Axis::Rows, vec![0, 2, 1]), false),
        (OpKind::TemperedNll, vec![(3, 2)], |t, x| t.tempered_nll(x[0], 0.7, Axis::Cols, vec![2, 0]), false),
        (OpKind::DembedNll, vec![(2, e)], |t, x| t.dembed_nll(x[0], vec![4, 1]), false),
        (OpKind::DembedNll, vec![(2, e)], |t, x| t.dembed_nll(x[0], vec![0, 3]), true),
        (OpKind::Sum, vec![(2, 3)], |t, x| Ok(t.sum(x[0])), false),
        (OpKind::Scale, vec![(2, 2)], |t, x| Ok(t.scale(x[0], -1.7)), false),
        (OpKind::Add, vec![(2, 2), (2, 2)], |t, x| t.add(x[0], x[1]), false),
        (OpKind::Mul, vec![(2, 2), (2, 2)], |t, x| t.mul(x[0], x[1]), false),
    ];

    let mut results: Vec<OpCheck> = Vec::new();
    for (kind, shapes, build, use_tied) in cases {
        let params = if use_tied { &tied } else { &untied };
        let inputs: Vec<Vec<f64>> = shapes
            .iter()
            .map(|&(r, c)| (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let eval = |params: &ModelParams, inputs: &[Vec<f64>], upstream: Option<&[f64]>| -> Result<(f64, Vec<f64>, Option<Gradients>, Vec<Var>)> {
            let mut tape = Tape::new(params).with_fault(fault);
            let vars = shapes
                .iter()
                .zip(inputs)
                .map(|(&(r, c), d)| tape.input(r, c, d.clone()))
                .collect::<Result<Vec<_>>>()?;
            let out = build(&mut tape, &vars)?;
            let value = tape.value(out).to_vec();
            let (w, grads) = match upstream {
                Some(w) => (w.to_vec(), Some(tape.backward_seeded(&[(out, w)])?)),
                None => (vec![0.0; value.len()], None),
            };
            Ok((crate::model::dot(&w, &value), value, grads, vars))
        };
        let (_, value, _, _) = eval(params, &inputs, None)?;
        let w: Vec<f64> = (0..value.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let (_, _, grads, vars) = eval(params, &inputs, Some(&w))?;
        let grads = grads.expect("seeded");
        let functional = |params: &ModelParams, inputs: &[Vec<f64>]| -> Result<f64> {
            let (_, v, _, _) = eval(params, inputs, None)?;
            Ok(crate::model::dot(&w, &v))
        };
        let mut max_err: f64 = 0.0;
        let mut probe = inputs.clone();
        for (k, var) in vars.iter().enumerate() {
            for i in 0..inputs[k].len() {
                let orig = inputs[k][i];
                probe[k][i] = orig + h;
                let plus = functional(params, &probe)?;
                probe[k][i] = orig - h;
                let minus = functional(params, &probe)?;
                probe[k][i] = orig;
                let fd = (plus - minus) / (2.0 * h);
                max_err = max_err.max((grads.wrt(*var)[i] - fd).abs() / fd.abs().max(1.0));
            }
        }
        let dense = grads.params.to_dense(params);
        let mut pprobe = params.clone();
        for tensor in ParamTensor::ALL {
            let Some(ana) = dense.tensor(tensor) else { continue };
            for i in 0..ana.len() {
                let orig = params.tensor(tensor).expect("layout")[i];
                pprobe.tensor_mut(tensor).expect("layout")[i] = orig + h;
                let plus = functional(&pprobe, &inputs)?;
                pprobe.tensor_mut(tensor).expect("layout")[i] = orig - h;
                let minus = functional(&pprobe, &inputs)?;
                pprobe.tensor_mut(tensor).expect("layout")[i] = orig;
                let fd = (plus - minus) / (2.0 * h);
                max_err = max_err.max((ana[i] - fd).abs() / fd.abs().max(1.0));
            }
        }
        match results.iter_mut().find(|c| c.op == kind) {
            Some(existing) => {
                existing.max_rel_err = existing.max_rel_err.max(max_err);
                existing.passed = existing.max_rel_err <= tol;
            }
            None => results.push(OpCheck {
                op: kind,
                max_rel_err: max_err,
                passed: max_err <= tol,
            }),
        }
    }
    Ok(results)
}

/// `c = beta * c + a * b` for an `m x k` by `k x n` product, with `a` and `b`
/// given as `(data, row stride, column stride)` and `c` row-major.
fn gemm(m: usize, k: usize, n: usize, a: (&[f64], usize, usize), b: (&[f64], usize, usize), c: &mut [f64], beta: f64) {
    let ((av, rsa, csa), (bv, rsb, csb)) = (a, b);
    assert!(c.len() == m * n, "gemm output size");
    if m == 0 || n == 0 {
        return;
    }
    if k > 0 {
        assert!(av.len() > (m - 1) * rsa + (k - 1) * csa && bv.len() > (k - 1) * rsb + (n - 1) * csb, "gemm operand size");
    }
    // SAFETY: the asserts above bound every index the kernel reads or writes.
    unsafe {
        matrixmultiply::dgemm(
            m, k, n, 1.0,
            av.as_ptr(), rsa as isize, csa as isize,
            bv.as_ptr(), rsb as isize, csb as isize,
            beta,
            c.as_mut_ptr(), n as isize, 1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn params() -> ModelParams {
        ModelParams::new(&ModelConfig::new(6, 2, 2).unwrap(), 3).unwrap()
    }

    #[test]
    fn sum_of_squares_gradient_is_twice_input() {
        let p = params();
        let mut t = Tape::new(&p);
        let x = t.input(1, 4, vec![0.5, -1.0, 2.0, 3.0]).unwrap();
        let sq = t.mul(x, x).unwrap();
        let loss = t.sum(sq);
        assert_eq!(t.scalar(loss).unwrap(), 0.25 + 1.0 + 4.0 + 9.0);
        let g = t.backward(loss).unwrap();
        assert_eq!(g.wrt(x), &[1.0, -2.0, 4.0, 6.0]);
    }

    #[test]
    fn cosine_with_itself_has_zero_gradient() {
        let p = params();
        let mut t = Tape::new(&p);
        let x = t.input(1, 3, vec![0.3, -1.2, 0.8]).unwrap();
        let n = t.normalize_rows(x).unwrap();
        let c = t.gram(n, n).unwrap();
        assert!((t.scalar(c).unwrap() - 1.0).abs() < 1e-15);
        let g = t.backward(c).unwrap();
        assert!(g.wrt(x).iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn backward_requires_scalar() {
        let p = params();
        let mut t = Tape::new(&p);
        let x = t.input(1, 2, vec![1.0, 2.0]).unwrap();
        assert!(matches!(t.backward(x), Err(Error::Autograd(_))));
    }

    #[test]
    fn untouched_parameters_have_zero_gradient() {
        let p = params();
        let mut t = Tape::new(&p);
        let a = t.lookup(1).unwrap();
        let b = t.lookup(4).unwrap();
        let c = t.compose(a, b).unwrap();
        let loss = t.sum(c);
        let g = t.backward(loss).unwrap();
        assert!(g.params.decompose_weight.iter().all(|&x| x == 0.0));
        assert!(g.params.dembedding.is_none());
        assert_eq!(g.params.embedding_rows.keys().copied().collect::<Vec<_>>(), vec![1, 4]);
    }

    #[test]
    fn seeds_accumulate_and_gradients_are_linear() {
        let p = params();
        let mut t = Tape::new(&p);
        let x = t.input(1, 3, vec![0.1, 0.2, -0.3]).unwrap();
        let y = t.mul(x, x).unwrap();
        let a = t.backward_seeded(&[(y, &[1.0, 1.0, 1.0])]).unwrap();
        let b = t.backward_seeded(&[(y, &[0.5, 0.5, 0.5]), (y, &[0.5, 0.5, 0.5])]).unwrap();
        assert_eq!(a.wrt(x), b.wrt(x));
    }

    #[test]
    fn quadratic_grad_check_is_tight() {
        let p = params();
        let report = grad_check(&p, 1e-6, 1e-9, |q| {
            let mut t = Tape::new(q);
            let a = t.lookup(0).unwrap();
            let b = t.lookup(1).unwrap();
            let c = t.compose(a, b).unwrap();
            let sq = t.mul(c, c).unwrap();
            let l = t.sum(sq);
            let g = t.backward(l).unwrap();
            Ok((t.scalar(l).unwrap(), g.params.to_dense(q)))
        })
        .unwrap();
        assert!(report.max_rel_err < 1e-8, "{report:?}");
        assert!(report.passed());
    }

    #[test]
    fn every_op_adjoint_matches_finite_differences() {
        let checks = check_op_adjoints(17, 1e-6, 1e-7, None).unwrap();
        assert_eq!(checks.len(), OpKind::DIFFERENTIABLE.len());
        for c in &checks {
            assert!(c.passed, "{c:?}");
        }
    }

    #[test]
    fn negated_adjoint_is_identified() {
        for fault in [OpKind::Compose, OpKind::Gram, OpKind::TemperedNll, OpKind::DembedNll] {
            let checks = check_op_adjoints(5, 1e-6, 1e-6, Some(fault)).unwrap();
            let failing: Vec<_> = checks.iter().filter(|c| !c.passed).map(|c| c.op).collect();
            assert_eq!(failing, vec![fault]);
        }
    }

    #[test]
    fn tempered_nll_hand_value() {
        let p = params();
        let mut t = Tape::new(&p);
        let x = t.input(1, 3, vec![1.0, 2.0, 3.0]).unwrap();
        let l = t.tempered_nll(x, 1.0, Axis::Rows, vec![2]).unwrap();
        let expected = -(3f64.exp() / (1f64.exp() + 2f64.exp() + 3f64.exp())).ln();
        assert!((t.value(l)[0] - expected).abs() < 1e-15);
        assert!((expected - 0.4076).abs() < 1e-4);
    }
}
