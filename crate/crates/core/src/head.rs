//! Per-stream embedding head: FC → ReLU → FC → BatchNorm → L2 normalization.
//!
//! The visual and sentence streams each own one [`EmbeddingHead`] with the same
//! output width so their embeddings are comparable by Euclidean distance.
//!
//! Batch normalization normalizes with the biased batch variance and folds the
//! unbiased variance into the running estimate:
//!
//! ```text
//! running_mean ← (1 − momentum)·running_mean + momentum·batch_mean
//! running_var  ← (1 − momentum)·running_var  + momentum·batch_var·B/(B−1)
//! ```
//!
//! # Checkpoint layout (`JEH1`)
//!
//! All integers are u32 and all reals f64, little-endian:
//!
//! ```text
//! "JEH1" | version u8 = 1 | d_in | d_hidden | d_out | bn_momentum | bn_epsilon
//! | w1 (d_hidden·d_in) | b1 (d_hidden) | w2 (d_out·d_hidden) | b2 (d_out)
//! | bn_gamma | bn_beta | bn_running_mean | bn_running_var   (d_out each)
//! ```

use std::path::Path;

use crate::codec::{read_file, write_file, ByteReader, ByteWriter};
use crate::error::{Error, Result};
use crate::tensor::{dot, Matrix, Rng, NORM_EPSILON};

pub const HEAD_MAGIC: &[u8; 4] = b"JEH1";
const HEAD_VERSION: u8 = 1;

pub const DEFAULT_BN_MOMENTUM: f64 = 0.1;
pub const DEFAULT_BN_EPSILON: f64 = 1e-5;
/// Initial value of the first-layer bias, keeping all-zero hidden rows unlikely.
pub const B1_INIT: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HeadConfig {
    pub d_in: usize,
    pub d_hidden: usize,
    pub d_out: usize,
    pub bn_momentum: f64,
    pub bn_epsilon: f64,
}

impl HeadConfig {
    /// Hidden width defaults to the output width.
    pub fn new(d_in: usize, d_out: usize) -> Self {
        Self {
            d_in,
            d_hidden: d_out,
            d_out,
            bn_momentum: DEFAULT_BN_MOMENTUM,
            bn_epsilon: DEFAULT_BN_EPSILON,
        }
    }

    pub fn with_hidden(mut self, d_hidden: usize) -> Self {
        self.d_hidden = d_hidden;
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingHead {
    /// `d_hidden × d_in`
    pub w1: Matrix,
    pub b1: Vec<f64>,
    /// `d_out × d_hidden`
    pub w2: Matrix,
    pub b2: Vec<f64>,
    pub bn_gamma: Vec<f64>,
    pub bn_beta: Vec<f64>,
    pub bn_running_mean: Vec<f64>,
    pub bn_running_var: Vec<f64>,
    pub bn_momentum: f64,
    pub bn_epsilon: f64,
}

/// Gradients of a scalar loss with respect to every learnable head parameter.
///
/// Also used as the momentum buffer of the optimizer.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadGradients {
    pub w1: Matrix,
    pub b1: Vec<f64>,
    pub w2: Matrix,
    pub b2: Vec<f64>,
    pub bn_gamma: Vec<f64>,
    pub bn_beta: Vec<f64>,
}

/// Activations cached by a forward pass for use by [`EmbeddingHead::backward`].
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub mode: Mode,
    pub input: Matrix,
    pub hidden_pre: Matrix,
    pub hidden: Matrix,
    pub pre_bn: Matrix,
    pub batch_mean: Vec<f64>,
    /// Biased batch variance (train mode) or running variance (eval mode).
    pub batch_var: Vec<f64>,
    pub inv_std: Vec<f64>,
    pub normalized: Matrix,
    pub bn_out: Matrix,
    pub row_norms: Vec<f64>,
    pub embeddings: Matrix,
}

impl ForwardTrace {
    pub fn batch_size(&self) -> usize {
        self.input.rows()
    }
}

impl EmbeddingHead {
    /// Glorot-uniform weights, `b1 = 0.01`, `b2 = 0`, identity batch-norm.
    pub fn new(cfg: HeadConfig, rng: &mut Rng) -> Result<Self> {
        if cfg.d_in == 0 || cfg.d_hidden == 0 || cfg.d_out == 0 {
            return Err(Error::InvalidArgument(format!(
                "head dimensions must be positive (d_in={}, d_hidden={}, d_out={})",
                cfg.d_in, cfg.d_hidden, cfg.d_out
            )));
        }
        if !(cfg.bn_momentum > 0.0 && cfg.bn_momentum <= 1.0) || cfg.bn_epsilon <= 0.0 {
            return Err(Error::InvalidArgument(
                "bn_momentum must be in (0, 1] and bn_epsilon positive".into(),
            ));
        }
        let bound1 = (6.0 / (cfg.d_in + cfg.d_hidden) as f64).sqrt();
        let bound2 = (6.0 / (cfg.d_hidden + cfg.d_out) as f64).sqrt();
        let w1 = rng.uniform_matrix(cfg.d_hidden, cfg.d_in, bound1);
        let w2 = rng.uniform_matrix(cfg.d_out, cfg.d_hidden, bound2);
        Ok(Self {
            w1,
            b1: vec![B1_INIT; cfg.d_hidden],
            w2,
            b2: vec![0.0; cfg.d_out],
            bn_gamma: vec![1.0; cfg.d_out],
            bn_beta: vec![0.0; cfg.d_out],
            bn_running_mean: vec![0.0; cfg.d_out],
            bn_running_var: vec![1.0; cfg.d_out],
            bn_momentum: cfg.bn_momentum,
            bn_epsilon: cfg.bn_epsilon,
        })
    }

    pub fn d_in(&self) -> usize {
        self.w1.cols()
    }

    pub fn d_hidden(&self) -> usize {
        self.w1.rows()
    }

    pub fn d_out(&self) -> usize {
        self.w2.rows()
    }

    pub fn config(&self) -> HeadConfig {
        HeadConfig {
            d_in: self.d_in(),
            d_hidden: self.d_hidden(),
            d_out: self.d_out(),
            bn_momentum: self.bn_momentum,
            bn_epsilon: self.bn_epsilon,
        }
    }

    /// Checks shape congruence, finiteness and positive running variance.
    pub fn validate(&self) -> Result<()> {
        let (h, d) = (self.d_hidden(), self.d_out());
        if self.w2.cols() != h {
            return Err(Error::dims("EmbeddingHead w2 cols", h, self.w2.cols()));
        }
        for (name, len, want) in [
            ("b1", self.b1.len(), h),
            ("b2", self.b2.len(), d),
            ("bn_gamma", self.bn_gamma.len(), d),
            ("bn_beta", self.bn_beta.len(), d),
            ("bn_running_mean", self.bn_running_mean.len(), d),
            ("bn_running_var", self.bn_running_var.len(), d),
        ] {
            if len != want {
                return Err(Error::dims("EmbeddingHead", format!("{name} of length {want}"), len));
            }
        }
        let finite = self.w1.is_finite()
            && self.w2.is_finite()
            && [
                &self.b1,
                &self.b2,
                &self.bn_gamma,
                &self.bn_beta,
                &self.bn_running_mean,
                &self.bn_running_var,
            ]
            .iter()
            .all(|v| v.iter().all(|x| x.is_finite()));
        if !finite {
            return Err(Error::NonFinite {
                context: "embedding head parameters".into(),
            });
        }
        if self.bn_running_var.iter().any(|&v| v <= 0.0) {
            return Err(Error::InvalidArgument(
                "bn_running_var entries must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Dispatches to [`forward_train`](Self::forward_train) or [`forward_eval`](Self::forward_eval).
    pub fn forward(&mut self, batch: &Matrix, mode: Mode) -> Result<(Matrix, ForwardTrace)> {
        match mode {
            Mode::Train => self.forward_train(batch),
            Mode::Eval => self.forward_eval(batch),
        }
    }

    /// Forward with batch statistics; updates the running statistics on success.
    pub fn forward_train(&mut self, batch: &Matrix) -> Result<(Matrix, ForwardTrace)> {
        let b = batch.rows();
        if b < 2 {
            return Err(Error::InvalidArgument(format!(
                "train-mode forward needs at least 2 rows, got {b}"
            )));
        }
        let (input, hidden_pre, hidden, pre_bn) = self.dense_layers(batch)?;
        let d = self.d_out();
        let bf = b as f64;
        let mut mean = vec![0.0; d];
        for row in pre_bn.iter_rows() {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        for m in &mut mean {
            *m /= bf;
        }
        let mut var = vec![0.0; d];
        for row in pre_bn.iter_rows() {
            for c in 0..d {
                let dv = row[c] - mean[c];
                var[c] += dv * dv;
            }
        }
        for v in &mut var {
            *v /= bf;
        }
        let trace = self.finish_forward(Mode::Train, input, hidden_pre, hidden, pre_bn, mean, var)?;

        let m = self.bn_momentum;
        let correction = bf / (bf - 1.0);
        for c in 0..d {
            self.bn_running_mean[c] = (1.0 - m) * self.bn_running_mean[c] + m * trace.batch_mean[c];
            self.bn_running_var[c] =
                (1.0 - m) * self.bn_running_var[c] + m * trace.batch_var[c] * correction;
        }
        Ok((trace.embeddings.clone(), trace))
    }

    /// Forward with running statistics; never mutates the head.
    pub fn forward_eval(&self, batch: &Matrix) -> Result<(Matrix, ForwardTrace)> {
        let (input, hidden_pre, hidden, pre_bn) = self.dense_layers(batch)?;
        let trace = self.finish_forward(
            Mode::Eval,
            input,
            hidden_pre,
            hidden,
            pre_bn,
            self.bn_running_mean.clone(),
            self.bn_running_var.clone(),
        )?;
        Ok((trace.embeddings.clone(), trace))
    }

    /// Eval-mode embeddings only.
    pub fn embed(&self, batch: &Matrix) -> Result<Matrix> {
        Ok(self.forward_eval(batch)?.0)
    }

    fn dense_layers(&self, batch: &Matrix) -> Result<(Matrix, Matrix, Matrix, Matrix)> {
        if batch.cols() != self.d_in() {
            return Err(Error::dims("EmbeddingHead::forward input cols", self.d_in(), batch.cols()));
        }
        let mut hidden_pre = batch.matmul_transposed(&self.w1)?;
        for r in 0..hidden_pre.rows() {
            for (v, bias) in hidden_pre.row_mut(r).iter_mut().zip(&self.b1) {
                *v += bias;
            }
        }
        let mut hidden = hidden_pre.clone();
        for v in hidden.data_mut() {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
        let mut pre_bn = hidden.matmul_transposed(&self.w2)?;
        for r in 0..pre_bn.rows() {
            for (v, bias) in pre_bn.row_mut(r).iter_mut().zip(&self.b2) {
                *v += bias;
            }
        }
        Ok((batch.clone(), hidden_pre, hidden, pre_bn))
    }

    #[allow(clippy::too_many_arguments)]
    fn finish_forward(
        &self,
        mode: Mode,
        input: Matrix,
        hidden_pre: Matrix,
        hidden: Matrix,
        pre_bn: Matrix,
        mean: Vec<f64>,
        var: Vec<f64>,
    ) -> Result<ForwardTrace> {
        let (b, d) = pre_bn.shape();
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + self.bn_epsilon).sqrt()).collect();
        let mut normalized = Matrix::zeros(b, d);
        let mut bn_out = Matrix::zeros(b, d);
        let mut embeddings = Matrix::zeros(b, d);
        let mut row_norms = Vec::with_capacity(b);
        for r in 0..b {
            for c in 0..d {
                let xh = (pre_bn.get(r, c) - mean[c]) * inv_std[c];
                normalized.set(r, c, xh);
                bn_out.set(r, c, self.bn_gamma[c] * xh + self.bn_beta[c]);
            }
            let row = bn_out.row(r);
            let n = dot(row, row).sqrt();
            if !n.is_finite() {
                return Err(Error::NonFinite {
                    context: format!("embedding row {r}"),
                });
            }
            if n <= NORM_EPSILON {
                return Err(Error::ZeroNorm { norm: n });
            }
            for c in 0..d {
                embeddings.set(r, c, bn_out.get(r, c) / n);
            }
            row_norms.push(n);
        }
        Ok(ForwardTrace {
            mode,
            input,
            hidden_pre,
            hidden,
            pre_bn,
            batch_mean: mean,
            batch_var: var,
            inv_std,
            normalized,
            bn_out,
            row_norms,
            embeddings,
        })
    }

    /// Exact gradients for upstream gradient `d_embeddings` of a train-mode trace.
    ///
    /// Returns the parameter gradients and the gradient with respect to the input rows.
    pub fn backward(
        &self,
        trace: &ForwardTrace,
        d_embeddings: &Matrix,
    ) -> Result<(HeadGradients, Matrix)> {
        if trace.mode != Mode::Train {
            return Err(Error::InvalidArgument(
                "backward requires a train-mode forward trace".into(),
            ));
        }
        let (b, d) = trace.embeddings.shape();
        if d_embeddings.shape() != (b, d) {
            return Err(Error::dims(
                "EmbeddingHead::backward upstream gradient",
                format!("{b}x{d}"),
                format!("{}x{}", d_embeddings.rows(), d_embeddings.cols()),
            ));
        }
        if trace.hidden.cols() != self.d_hidden() || trace.input.cols() != self.d_in() || d != self.d_out() {
            return Err(Error::dims(
                "EmbeddingHead::backward trace",
                "trace produced by this head",
                "incompatible trace",
            ));
        }
        let h = self.d_hidden();

        // L2 normalization: dv = (g − e·(e·g)) / ‖v‖
        let mut d_bn_out = Matrix::zeros(b, d);
        for r in 0..b {
            let e = trace.embeddings.row(r);
            let g = d_embeddings.row(r);
            let proj = dot(e, g);
            let n = trace.row_norms[r];
            for c in 0..d {
                d_bn_out.set(r, c, (g[c] - e[c] * proj) / n);
            }
        }

        // Batch norm with batch statistics.
        let mut d_gamma = vec![0.0; d];
        let mut d_beta = vec![0.0; d];
        for r in 0..b {
            for c in 0..d {
                let g = d_bn_out.get(r, c);
                d_gamma[c] += g * trace.normalized.get(r, c);
                d_beta[c] += g;
            }
        }
        let bf = b as f64;
        let mut d_pre_bn = Matrix::zeros(b, d);
        for c in 0..d {
            let mut sum_dxh = 0.0;
            let mut sum_dxh_xh = 0.0;
            for r in 0..b {
                let dxh = d_bn_out.get(r, c) * self.bn_gamma[c];
                sum_dxh += dxh;
                sum_dxh_xh += dxh * trace.normalized.get(r, c);
            }
            for r in 0..b {
                let dxh = d_bn_out.get(r, c) * self.bn_gamma[c];
                let v = trace.inv_std[c] / bf
                    * (bf * dxh - sum_dxh - trace.normalized.get(r, c) * sum_dxh_xh);
                d_pre_bn.set(r, c, v);
            }
        }

        // Second dense layer.
        let mut d_b2 = vec![0.0; d];
        let mut d_w2 = Matrix::zeros(d, h);
        for r in 0..b {
            let g = d_pre_bn.row(r);
            let hid = trace.hidden.row(r);
            for c in 0..d {
                d_b2[c] += g[c];
                for k in 0..h {
                    d_w2.data_mut()[c * h + k] += g[c] * hid[k];
                }
            }
        }
        let mut d_hidden_pre = d_pre_bn.matmul(&self.w2)?;
        for (g, &pre) in d_hidden_pre.data_mut().iter_mut().zip(trace.hidden_pre.data()) {
            if pre <= 0.0 {
                *g = 0.0;
            }
        }

        // First dense layer.
        let d_in = self.d_in();
        let mut d_b1 = vec![0.0; h];
        let mut d_w1 = Matrix::zeros(h, d_in);
        for r in 0..b {
            let g = d_hidden_pre.row(r);
            let x = trace.input.row(r);
            for k in 0..h {
                d_b1[k] += g[k];
                for i in 0..d_in {
                    d_w1.data_mut()[k * d_in + i] += g[k] * x[i];
                }
            }
        }
        let d_input = d_hidden_pre.matmul(&self.w1)?;

        Ok((
            HeadGradients {
                w1: d_w1,
                b1: d_b1,
                w2: d_w2,
                b2: d_b2,
                bn_gamma: d_gamma,
                bn_beta: d_beta,
            },
            d_input,
        ))
    }

    /// Learnable parameters in canonical order: w1, b1, w2, b2, gamma, beta.
    pub fn params_mut(&mut self) -> [&mut [f64]; 6] {
        [
            self.w1.data_mut(),
            &mut self.b1,
            self.w2.data_mut(),
            &mut self.b2,
            &mut self.bn_gamma,
            &mut self.bn_beta,
        ]
    }

    pub fn params(&self) -> [&[f64]; 6] {
        [
            self.w1.data(),
            &self.b1,
            self.w2.data(),
            &self.b2,
            &self.bn_gamma,
            &self.bn_beta,
        ]
    }

    pub(crate) fn encode(&self, w: &mut ByteWriter) {
        w.bytes(HEAD_MAGIC);
        w.u8(HEAD_VERSION);
        w.u32(self.d_in() as u32);
        w.u32(self.d_hidden() as u32);
        w.u32(self.d_out() as u32);
        w.f64(self.bn_momentum);
        w.f64(self.bn_epsilon);
        w.f64s(self.w1.data());
        w.f64s(&self.b1);
        w.f64s(self.w2.data());
        w.f64s(&self.b2);
        w.f64s(&self.bn_gamma);
        w.f64s(&self.bn_beta);
        w.f64s(&self.bn_running_mean);
        w.f64s(&self.bn_running_var);
    }

    pub(crate) fn decode(r: &mut ByteReader<'_>) -> Result<Self> {
        r.magic(HEAD_MAGIC)?;
        r.version(HEAD_VERSION)?;
        let d_in = r.u32("d_in")? as usize;
        let d_hidden = r.u32("d_hidden")? as usize;
        let d_out = r.u32("d_out")? as usize;
        if d_in == 0 || d_hidden == 0 || d_out == 0 {
            return Err(r.err("zero dimension in head header"));
        }
        let bn_momentum = r.f64("bn_momentum")?;
        let bn_epsilon = r.f64("bn_epsilon")?;
        let w1 = Matrix::from_vec(d_hidden, d_in, r.f64s(d_hidden * d_in, "w1")?)?;
        let b1 = r.f64s(d_hidden, "b1")?;
        let w2 = Matrix::from_vec(d_out, d_hidden, r.f64s(d_out * d_hidden, "w2")?)?;
        let b2 = r.f64s(d_out, "b2")?;
        let bn_gamma = r.f64s(d_out, "bn_gamma")?;
        let bn_beta = r.f64s(d_out, "bn_beta")?;
        let bn_running_mean = r.f64s(d_out, "bn_running_mean")?;
        let bn_running_var = r.f64s(d_out, "bn_running_var")?;
        let head = Self {
            w1,
            b1,
            w2,
            b2,
            bn_gamma,
            bn_beta,
            bn_running_mean,
            bn_running_var,
            bn_momentum,
            bn_epsilon,
        };
        head.validate().map_err(|e| r.err(e.to_string()))?;
        Ok(head)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = ByteWriter::new();
        self.encode(&mut w);
        w.into_inner()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes, "<memory>");
        let head = Self::decode(&mut r)?;
        r.finish()?;
        Ok(head)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = read_file(path)?;
        let mut r = ByteReader::new(&bytes, path);
        let head = Self::decode(&mut r)?;
        r.finish()?;
        Ok(head)
    }
}

impl HeadGradients {
    pub fn zeros_like(head: &EmbeddingHead) -> Self {
        Self {
            w1: Matrix::zeros(head.d_hidden(), head.d_in()),
            b1: vec![0.0; head.d_hidden()],
            w2: Matrix::zeros(head.d_out(), head.d_hidden()),
            b2: vec![0.0; head.d_out()],
            bn_gamma: vec![0.0; head.d_out()],
            bn_beta: vec![0.0; head.d_out()],
        }
    }

    pub fn slices(&self) -> [&[f64]; 6] {
        [
            self.w1.data(),
            &self.b1,
            self.w2.data(),
            &self.b2,
            &self.bn_gamma,
            &self.bn_beta,
        ]
    }

    pub fn slices_mut(&mut self) -> [&mut [f64]; 6] {
        [
            self.w1.data_mut(),
            &mut self.b1,
            self.w2.data_mut(),
            &mut self.b2,
            &mut self.bn_gamma,
            &mut self.bn_beta,
        ]
    }

    pub fn is_congruent(&self, head: &EmbeddingHead) -> bool {
        self.slices()
            .iter()
            .zip(head.params())
            .all(|(g, p)| g.len() == p.len())
    }

    pub fn is_finite(&self) -> bool {
        self.slices().iter().all(|s| s.iter().all(|v| v.is_finite()))
    }

    pub(crate) fn encode(&self, w: &mut ByteWriter) {
        for s in self.slices() {
            w.f64s(s);
        }
    }

    pub(crate) fn decode_like(head: &EmbeddingHead, r: &mut ByteReader<'_>) -> Result<Self> {
        let mut g = Self::zeros_like(head);
        for s in g.slices_mut() {
            let vals = r.f64s(s.len(), "gradient buffer")?;
            s.copy_from_slice(&vals);
        }
        Ok(g)
    }
}
