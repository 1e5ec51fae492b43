//! LSTM and batch-normalized LSTM cells with backpropagation through time.
//!
//! Gate pre-activations are stored fused as `[B × 4h]` in the order
//! input, output, forget, candidate. Per-gate batch normalization of the
//! fused block is the same as normalizing each gate separately since the
//! statistics are per feature.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{dim_err, Result};
use crate::init;
use crate::layers::{join, BatchNorm, BatchNormCache, Mode, Param, Parameters, BN_GAMMA_INIT};
use crate::tensor::{sigmoid, Tensor};

pub const GATE_INPUT: usize = 0;
pub const GATE_OUTPUT: usize = 1;
pub const GATE_FORGET: usize = 2;
pub const GATE_CANDIDATE: usize = 3;

pub const FORGET_BIAS_INIT: f64 = 1.0;
pub const DEFAULT_T_CAP: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CellKind {
    Lstm,
    BnLstm,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NormSettings {
    pub t_cap: usize,
    pub decay: f64,
    pub eps: f64,
}

impl Default for NormSettings {
    fn default() -> Self {
        Self { t_cap: DEFAULT_T_CAP, decay: crate::layers::BN_DECAY, eps: crate::layers::BN_EPS }
    }
}

/// The three normalizers of a batch-normalized cell. Input and recurrent
/// normalizers keep their shift at zero; the gate bias provides it.
#[derive(Clone, Debug)]
pub struct CellNorms {
    pub input: BatchNorm,
    pub recurrent: BatchNorm,
    pub cell: BatchNorm,
}

#[derive(Clone, Debug)]
pub struct LstmCell {
    pub w: Param,
    pub u: Param,
    pub b: Param,
    pub norms: Option<CellNorms>,
    hidden: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CellState {
    pub h: Tensor,
    pub c: Tensor,
}

impl CellState {
    pub fn zeros(batch: usize, hidden: usize) -> Self {
        Self { h: Tensor::zeros(&[batch, hidden]), c: Tensor::zeros(&[batch, hidden]) }
    }
}

/// Everything one step's backward pass needs.
#[derive(Clone, Debug)]
pub struct StepCache {
    x: Tensor,
    h_prev: Tensor,
    c_prev: Tensor,
    gates: Tensor,
    tanh_c: Tensor,
    norm: Option<[BatchNormCache; 3]>,
}

impl LstmCell {
    /// Orthogonal `W`/`U` blocks per gate, forget bias 1, other biases 0.
    pub fn new<R: Rng + ?Sized>(rng: &mut R, inputs: usize, hidden: usize, kind: CellKind, norm: NormSettings) -> Self {
        let mut w = Tensor::zeros(&[inputs, 4 * hidden]);
        let mut u = Tensor::zeros(&[hidden, 4 * hidden]);
        for gate in 0..4 {
            let wb = init::orthogonal(rng, inputs, hidden);
            let ub = init::orthogonal(rng, hidden, hidden);
            write_block(&mut w, gate * hidden, &wb);
            write_block(&mut u, gate * hidden, &ub);
        }
        let mut b = Tensor::zeros(&[4 * hidden]);
        b.data_mut()[GATE_FORGET * hidden..(GATE_FORGET + 1) * hidden].fill(FORGET_BIAS_INIT);
        Self::from_parts(w, u, b, kind, norm)
    }

    /// A cell with all weights and biases set to zero.
    pub fn zeroed(inputs: usize, hidden: usize, kind: CellKind, norm: NormSettings) -> Self {
        let w = Tensor::zeros(&[inputs, 4 * hidden]);
        let u = Tensor::zeros(&[hidden, 4 * hidden]);
        Self::from_parts(w, u, Tensor::zeros(&[4 * hidden]), kind, norm)
    }

    fn from_parts(w: Tensor, u: Tensor, b: Tensor, kind: CellKind, norm: NormSettings) -> Self {
        let hidden = u.shape()[0];
        let norms = match kind {
            CellKind::Lstm => None,
            CellKind::BnLstm => Some(CellNorms {
                input: BatchNorm::new(4 * hidden, norm.t_cap, BN_GAMMA_INIT, false, norm.decay, norm.eps),
                recurrent: BatchNorm::new(4 * hidden, norm.t_cap, BN_GAMMA_INIT, false, norm.decay, norm.eps),
                cell: BatchNorm::new(hidden, norm.t_cap, BN_GAMMA_INIT, true, norm.decay, norm.eps),
            }),
        };
        Self { w: Param::new(w), u: Param::new(u), b: Param::new(b), norms, hidden }
    }

    pub fn kind(&self) -> CellKind {
        if self.norms.is_some() {
            CellKind::BnLstm
        } else {
            CellKind::Lstm
        }
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn inputs(&self) -> usize {
        self.w.value.shape()[0]
    }

    /// Gate block `gate` of `W` (`[inputs × hidden]`).
    pub fn w_block(&self, gate: usize) -> Tensor {
        self.w.value.col_block(gate * self.hidden, self.hidden)
    }

    pub fn u_block(&self, gate: usize) -> Tensor {
        self.u.value.col_block(gate * self.hidden, self.hidden)
    }

    /// One recurrence step at 1-based timestep `t`. Train-mode normalizer
    /// statistics are returned in the cache and applied by [`LstmCell::commit`].
    pub fn step(&self, x: &Tensor, prev: &CellState, t: usize, mode: Mode) -> Result<(CellState, StepCache)> {
        let h = self.hidden;
        if x.shape().len() != 2 || x.cols() != self.inputs() {
            return Err(dim_err("lstm_step", format!("input {:?}, expected width {}", x.shape(), self.inputs())));
        }
        let batch = x.rows();
        if prev.h.shape() != [batch, h] || prev.c.shape() != [batch, h] {
            return Err(dim_err("lstm_step", format!("state {:?}, expected [{batch}, {h}]", prev.h.shape())));
        }
        let zx = x.matmul(&self.w.value)?;
        let zh = prev.h.matmul(&self.u.value)?;
        let slot = t.max(1) - 1;
        let (mut z, mut caches) = match &self.norms {
            None => (zx.add(&zh)?, None),
            Some(n) => {
                let (ax, cx) = n.input.forward(&zx, slot, mode)?;
                let (ah, ch) = n.recurrent.forward(&zh, slot, mode)?;
                (ax.add(&ah)?, Some((cx, ch)))
            }
        };
        let bias = self.b.value.data();
        for row in z.data_mut().chunks_mut(4 * h) {
            for (j, v) in row.iter_mut().enumerate() {
                *v += bias[j];
                *v = if j >= GATE_CANDIDATE * h { libm::tanh(*v) } else { sigmoid(*v) };
            }
        }
        let gates = z;
        let mut c = Tensor::zeros(&[batch, h]);
        for r in 0..batch {
            let g = gates.row(r);
            let cp = prev.c.row(r);
            let cr = c.row_mut(r);
            for k in 0..h {
                cr[k] = g[GATE_FORGET * h + k] * cp[k] + g[GATE_INPUT * h + k] * g[GATE_CANDIDATE * h + k];
            }
        }
        let (normed_c, norm_caches) = match (&self.norms, caches.take()) {
            (Some(n), Some((cx, ch))) => {
                let (cn, cc) = n.cell.forward(&c, slot, mode)?;
                (Some(cn), Some([cx, ch, cc]))
            }
            _ => (None, None),
        };
        let tanh_c = normed_c.as_ref().unwrap_or(&c).tanh();
        let mut hidden = Tensor::zeros(&[batch, h]);
        for r in 0..batch {
            let g = gates.row(r);
            let tc = tanh_c.row(r);
            let hr = hidden.row_mut(r);
            for k in 0..h {
                hr[k] = g[GATE_OUTPUT * h + k] * tc[k];
            }
        }
        let cache = StepCache {
            x: x.clone(),
            h_prev: prev.h.clone(),
            c_prev: prev.c.clone(),
            gates,
            tanh_c,
            norm: norm_caches,
        };
        Ok((CellState { h: hidden, c }, cache))
    }

    /// Returns `(dx, dh_prev, dc_prev)` and accumulates parameter gradients.
    pub fn backward(&mut self, cache: &StepCache, dh: &Tensor, dc_next: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
        let h = self.hidden;
        let batch = dh.rows();
        // gradient w.r.t. the (possibly normalized) cell value fed to tanh
        let mut dcn = Tensor::zeros(&[batch, h]);
        let mut dz = Tensor::zeros(&[batch, 4 * h]);
        for r in 0..batch {
            let g = cache.gates.row(r);
            let tc = cache.tanh_c.row(r);
            let dhr = dh.row(r);
            let dcr = dcn.row_mut(r);
            for k in 0..h {
                let o = g[GATE_OUTPUT * h + k];
                dcr[k] = dhr[k] * o * (1.0 - tc[k] * tc[k]);
            }
            let dzr = dz.row_mut(r);
            for k in 0..h {
                let o = g[GATE_OUTPUT * h + k];
                dzr[GATE_OUTPUT * h + k] = dhr[k] * tc[k] * o * (1.0 - o);
            }
        }
        let mut dc = match (&mut self.norms, &cache.norm) {
            (Some(n), Some(nc)) => n.cell.backward(&nc[2], &dcn),
            _ => dcn,
        };
        dc.add_assign(dc_next)?;
        let mut dc_prev = Tensor::zeros(&[batch, h]);
        for r in 0..batch {
            let g = cache.gates.row(r);
            let cp = cache.c_prev.row(r);
            let dcr = dc.row(r);
            let dzr = dz.row_mut(r);
            for k in 0..h {
                let i = g[GATE_INPUT * h + k];
                let f = g[GATE_FORGET * h + k];
                let cand = g[GATE_CANDIDATE * h + k];
                dzr[GATE_INPUT * h + k] = dcr[k] * cand * i * (1.0 - i);
                dzr[GATE_FORGET * h + k] = dcr[k] * cp[k] * f * (1.0 - f);
                dzr[GATE_CANDIDATE * h + k] = dcr[k] * i * (1.0 - cand * cand);
            }
            let dcp = dc_prev.row_mut(r);
            for k in 0..h {
                dcp[k] = dcr[k] * g[GATE_FORGET * h + k];
            }
        }
        self.b.grad.add_assign(&dz.sum_rows())?;
        let (dzx, dzh) = match (&mut self.norms, &cache.norm) {
            (Some(n), Some(nc)) => (n.input.backward(&nc[0], &dz), n.recurrent.backward(&nc[1], &dz)),
            _ => (dz.clone(), dz),
        };
        self.w.grad.add_assign(&cache.x.matmul_tn(&dzx)?)?;
        self.u.grad.add_assign(&cache.h_prev.matmul_tn(&dzh)?)?;
        let dx = dzx.matmul_nt(&self.w.value)?;
        let dh_prev = dzh.matmul_nt(&self.u.value)?;
        Ok((dx, dh_prev, dc_prev))
    }

    pub fn commit(&mut self, cache: &StepCache) {
        if let (Some(n), Some(nc)) = (&mut self.norms, &cache.norm) {
            n.input.commit(&nc[0]);
            n.recurrent.commit(&nc[1]);
            n.cell.commit(&nc[2]);
        }
    }
}

impl Parameters for LstmCell {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&join(prefix, "w"), &mut self.w);
        f(&join(prefix, "u"), &mut self.u);
        f(&join(prefix, "b"), &mut self.b);
        if let Some(n) = &mut self.norms {
            n.input.visit_params(&join(prefix, "bn_x"), f);
            n.recurrent.visit_params(&join(prefix, "bn_h"), f);
            n.cell.visit_params(&join(prefix, "bn_c"), f);
        }
    }

    fn visit_state(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        if let Some(n) = &mut self.norms {
            n.input.visit_state(&join(prefix, "bn_x"), f);
            n.recurrent.visit_state(&join(prefix, "bn_h"), f);
            n.cell.visit_state(&join(prefix, "bn_c"), f);
        }
    }
}

fn write_block(dst: &mut Tensor, col: usize, block: &Tensor) {
    let width = block.cols();
    for r in 0..block.rows() {
        dst.row_mut(r)[col..col + width].copy_from_slice(block.row(r));
    }
}

/// Plain LSTM step; the cell must not carry normalizers.
pub fn lstm_step(x: &Tensor, prev: &CellState, cell: &LstmCell) -> Result<(CellState, StepCache)> {
    if cell.norms.is_some() {
        return Err(dim_err("lstm_step", format!("cell is {:?}", cell.kind())));
    }
    cell.step(x, prev, 1, Mode::Infer)
}

/// Batch-normalized LSTM step at 1-based timestep `t`.
pub fn bnlstm_step(x: &Tensor, prev: &CellState, cell: &LstmCell, t: usize, mode: Mode) -> Result<(CellState, StepCache)> {
    if cell.norms.is_none() {
        return Err(dim_err("bnlstm_step", format!("cell is {:?}", cell.kind())));
    }
    cell.step(x, prev, t, mode)
}

/// Layers of cells; layer `l > 0` consumes the hidden states of layer `l-1`.
#[derive(Clone, Debug)]
pub struct LstmStack {
    pub layers: Vec<LstmCell>,
}

pub type StackStepCache = Vec<StepCache>;

#[derive(Clone, Debug)]
pub struct SequenceOutput {
    /// Top-layer hidden state per timestep.
    pub hiddens: Vec<Tensor>,
    /// Final state of every layer.
    pub finals: Vec<CellState>,
    pub caches: Vec<StackStepCache>,
}

impl LstmStack {
    pub fn new<R: Rng + ?Sized>(
        rng: &mut R,
        inputs: usize,
        hidden: usize,
        depth: usize,
        kind: CellKind,
        norm: NormSettings,
    ) -> Self {
        let layers = (0..depth)
            .map(|l| LstmCell::new(rng, if l == 0 { inputs } else { hidden }, hidden, kind, norm))
            .collect();
        Self { layers }
    }

    pub fn hidden(&self) -> usize {
        self.layers[0].hidden()
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn zero_state(&self, batch: usize) -> Vec<CellState> {
        self.layers.iter().map(|l| CellState::zeros(batch, l.hidden())).collect()
    }

    pub fn step(&self, x: &Tensor, states: &[CellState], t: usize, mode: Mode) -> Result<(Vec<CellState>, StackStepCache)> {
        let mut next = Vec::with_capacity(self.layers.len());
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut input = x.clone();
        for (layer, state) in self.layers.iter().zip(states) {
            let (s, c) = layer.step(&input, state, t, mode)?;
            input = s.h.clone();
            next.push(s);
            caches.push(c);
        }
        Ok((next, caches))
    }

    /// Runs from zero initial state over per-timestep inputs `[B × d_in]`.
    pub fn run_sequence(&self, inputs: &[Tensor], mode: Mode) -> Result<SequenceOutput> {
        let first = inputs.first().ok_or_else(|| dim_err("run_sequence", "empty sequence".into()))?;
        let mut states = self.zero_state(first.rows());
        let mut hiddens = Vec::with_capacity(inputs.len());
        let mut caches = Vec::with_capacity(inputs.len());
        for (s, x) in inputs.iter().enumerate() {
            let (next, cache) = self.step(x, &states, s + 1, mode)?;
            hiddens.push(next.last().expect("depth >= 1").h.clone());
            caches.push(cache);
            states = next;
        }
        Ok(SequenceOutput { hiddens, finals: states, caches })
    }

    /// Backpropagation through time. `dh_top[s]` is the loss gradient w.r.t.
    /// the top hidden state at step `s`; returns the gradient w.r.t. each
    /// step's input.
    pub fn backward(&mut self, caches: &[StackStepCache], dh_top: &[Option<Tensor>]) -> Result<Vec<Tensor>> {
        let depth = self.layers.len();
        let batch = match caches.first() {
            Some(c) => c[0].x.rows(),
            None => return Ok(Vec::new()),
        };
        let mut carry_h: Vec<Tensor> = self.layers.iter().map(|l| Tensor::zeros(&[batch, l.hidden()])).collect();
        let mut carry_c = carry_h.clone();
        let mut dxs = Vec::with_capacity(caches.len());
        for s in (0..caches.len()).rev() {
            let mut from_above = dh_top.get(s).cloned().flatten();
            for l in (0..depth).rev() {
                let mut dh = carry_h[l].clone();
                if let Some(g) = &from_above {
                    dh.add_assign(g)?;
                }
                let (dx, dhp, dcp) = self.layers[l].backward(&caches[s][l], &dh, &carry_c[l])?;
                carry_h[l] = dhp;
                carry_c[l] = dcp;
                from_above = Some(dx);
            }
            dxs.push(from_above.expect("depth >= 1"));
        }
        dxs.reverse();
        Ok(dxs)
    }

    pub fn commit(&mut self, caches: &[StackStepCache]) {
        for step in caches {
            for (layer, cache) in self.layers.iter_mut().zip(step) {
                layer.commit(cache);
            }
        }
    }
}

impl Parameters for LstmStack {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        for (l, layer) in self.layers.iter_mut().enumerate() {
            layer.visit_params(&join(prefix, &format!("layer{l}")), f);
        }
    }

    fn visit_state(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        for (l, layer) in self.layers.iter_mut().enumerate() {
            layer.visit_state(&join(prefix, &format!("layer{l}")), f);
        }
    }
}
