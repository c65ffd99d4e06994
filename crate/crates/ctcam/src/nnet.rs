//! Deep LSTM acoustic models: parameter containers, forward inference,
//! backpropagation through time, initialization and checkpoint files.
//!
//! Layers are unidirectional or bidirectional LSTMs (gate order input,
//! forget, cell, output; no peepholes) with an optional linear
//! recurrent projection. Cell activations are clipped to a configurable
//! band after each update and the backward signal through the cell
//! state is clipped per timestep; both clips default on and can be
//! disabled for gradient checking. A final affine layer plus softmax
//! produces per-frame label posteriors.

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::{s, Array1, Array2, ArrayView1, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::frontend::{FeatureMatrix, FeatureNormalizer, StackConfig};
use crate::graphs::{InventoryKind, LabelInventory};

/// Magic bytes at the head of a checkpoint file.
pub const CHECKPOINT_MAGIC: &[u8; 5] = b"CTCM1";

/// Half-width of the uniform initialization band.
pub const INIT_RANGE: f64 = 0.04;

/// Default cell activation clip.
pub const DEFAULT_CELL_CLIP: f64 = 50.0;

/// Default per-timestep clip on the backward cell-state signal.
pub const DEFAULT_CELL_GRAD_CLIP: f64 = 1.0;

static NEXT_REVISION: AtomicU64 = AtomicU64::new(1);

fn fresh_revision() -> u64 {
    NEXT_REVISION.fetch_add(1, Ordering::Relaxed)
}

/// Whether a layer runs over time once or in both directions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Bidirectional,
}

/// Shape of one LSTM layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerSpec {
    pub cells: usize,
    pub direction: Direction,
    /// Linear recurrent projection size; `None` feeds the cell outputs
    /// back directly.
    pub projection: Option<usize>,
}

/// Named layer stacks for the standard model shapes.
pub fn arch_preset(name: &str) -> Result<Vec<LayerSpec>> {
    let uni = |cells| LayerSpec {
        cells,
        direction: Direction::Forward,
        projection: None,
    };
    let bi = |cells| LayerSpec {
        cells,
        direction: Direction::Bidirectional,
        projection: None,
    };
    match name {
        "ctc-uni" => Ok(vec![uni(500); 5]),
        "ctc-bi" => Ok(vec![bi(300); 5]),
        "conv-uni" => Ok(vec![
            LayerSpec {
                cells: 1000,
                direction: Direction::Forward,
                projection: Some(512)
            };
            2
        ]),
        "conv-bi" => Ok(vec![
            LayerSpec {
                cells: 1000,
                direction: Direction::Bidirectional,
                projection: Some(512)
            };
            2
        ]),
        other => Err(Error::InvalidArchitecture(format!(
            "unknown preset {other:?}"
        ))),
    }
}

/// Weights for one direction of one layer. Gate rows are stacked in the
/// order input, forget, cell, output (4 blocks of `cells` rows each).
#[derive(Debug, Clone, PartialEq)]
pub struct LstmWeights {
    pub w_x: Array2<f64>,
    pub w_h: Array2<f64>,
    pub b: Array1<f64>,
    pub w_p: Option<Array2<f64>>,
}

impl LstmWeights {
    fn zeros(input: usize, cells: usize, projection: Option<usize>) -> LstmWeights {
        let r = projection.unwrap_or(cells);
        LstmWeights {
            w_x: Array2::zeros((4 * cells, input)),
            w_h: Array2::zeros((4 * cells, r)),
            b: Array1::zeros(4 * cells),
            w_p: projection.map(|p| Array2::zeros((p, cells))),
        }
    }

    pub fn cells(&self) -> usize {
        self.b.len() / 4
    }

    /// Dimension this direction emits (projection size if present).
    pub fn out_dim(&self) -> usize {
        self.w_p.as_ref().map_or(self.cells(), |p| p.nrows())
    }
}

/// One layer: forward-direction weights plus backward-direction weights
/// when bidirectional.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub spec: LayerSpec,
    pub fw: LstmWeights,
    pub bw: Option<LstmWeights>,
}

impl Layer {
    pub fn out_dim(&self) -> usize {
        self.fw.out_dim() * if self.bw.is_some() { 2 } else { 1 }
    }
}

/// Affine output layer mapping the top hidden activations to logits.
#[derive(Debug, Clone, PartialEq)]
pub struct OutputLayer {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

/// A complete model: layer stack, output layer, the label inventory it
/// scores, optional feature normalizer, and the frame geometry its
/// input was prepared with.
#[derive(Debug, Clone)]
pub struct ModelParams {
    pub input_dim: usize,
    pub layers: Vec<Layer>,
    pub output: OutputLayer,
    pub inventory: LabelInventory,
    pub normalizer: Option<FeatureNormalizer>,
    pub stack: StackConfig,
    pub target_delay: usize,
    pub version: u32,
    revision: u64,
}

/// Toggles for the two stability clips. Gradient checks disable both.
#[derive(Debug, Clone, Copy)]
pub struct NnetOptions {
    pub cell_clip: Option<f64>,
    pub cell_grad_clip: Option<f64>,
}

impl Default for NnetOptions {
    fn default() -> Self {
        NnetOptions {
            cell_clip: Some(DEFAULT_CELL_CLIP),
            cell_grad_clip: Some(DEFAULT_CELL_GRAD_CLIP),
        }
    }
}

impl NnetOptions {
    /// Both clips off, for finite-difference comparisons.
    pub fn unclipped() -> Self {
        NnetOptions {
            cell_clip: None,
            cell_grad_clip: None,
        }
    }
}

/// Per-frame label posteriors; rows sum to one. Tagged with the
/// fingerprint of the inventory that defines the columns.
#[derive(Debug, Clone)]
pub struct Posteriorgram {
    pub probs: Array2<f64>,
    pub inventory_fingerprint: u64,
}

/// Softmax each row in a numerically safe way.
pub fn softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            z += *v;
        }
        for v in row.iter_mut() {
            *v /= z;
        }
    }
    out
}

/// Activations recorded by one direction pass, indexed by real frame
/// number regardless of traversal order.
#[derive(Debug, Clone)]
struct DirCache {
    gate_i: Array2<f64>,
    gate_f: Array2<f64>,
    gate_g: Array2<f64>,
    gate_o: Array2<f64>,
    /// Cell state after clipping.
    cell: Array2<f64>,
    hidden: Array2<f64>,
    out: Array2<f64>,
}

#[derive(Debug, Clone)]
struct LayerCache {
    fw: DirCache,
    bw: Option<DirCache>,
}

/// Everything [`ModelParams::backward`] needs from the forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    layer_inputs: Vec<Array2<f64>>,
    layers: Vec<LayerCache>,
    final_hidden: Array2<f64>,
    pub logits: Array2<f64>,
    fingerprint: u64,
}

/// Gradients for one direction of one layer.
#[derive(Debug, Clone)]
pub struct DirGrads {
    pub w_x: Array2<f64>,
    pub w_h: Array2<f64>,
    pub b: Array1<f64>,
    pub w_p: Option<Array2<f64>>,
}

#[derive(Debug, Clone)]
pub struct LayerGrads {
    pub fw: DirGrads,
    pub bw: Option<DirGrads>,
}

/// Parameter gradients shaped like [`ModelParams`], plus the scalar
/// loss the producing criterion reported.
#[derive(Debug, Clone)]
pub struct GradientSet {
    pub loss: f64,
    pub layers: Vec<LayerGrads>,
    pub out_w: Array2<f64>,
    pub out_b: Array1<f64>,
}

/// Borrowed view of one tensor, for walking parameters and gradients in
/// the same canonical order (per layer: forward `w_x, w_h, b, w_p`,
/// then backward likewise; finally output `w, b`). Checkpoint files
/// serialize tensors in exactly this order.
pub enum TensorRef<'a> {
    M(&'a Array2<f64>),
    V(&'a Array1<f64>),
}

pub enum TensorMut<'a> {
    M(&'a mut Array2<f64>),
    V(&'a mut Array1<f64>),
}

fn dir_tensors<'a>(w: &'a LstmWeights, out: &mut Vec<TensorRef<'a>>) {
    out.push(TensorRef::M(&w.w_x));
    out.push(TensorRef::M(&w.w_h));
    out.push(TensorRef::V(&w.b));
    if let Some(p) = &w.w_p {
        out.push(TensorRef::M(p));
    }
}

fn dir_tensors_mut<'a>(w: &'a mut LstmWeights, out: &mut Vec<TensorMut<'a>>) {
    out.push(TensorMut::M(&mut w.w_x));
    out.push(TensorMut::M(&mut w.w_h));
    out.push(TensorMut::V(&mut w.b));
    if let Some(p) = &mut w.w_p {
        out.push(TensorMut::M(p));
    }
}

impl ModelParams {
    /// All parameter tensors in canonical order.
    pub fn tensors(&self) -> Vec<TensorRef<'_>> {
        let mut out = Vec::new();
        for layer in &self.layers {
            dir_tensors(&layer.fw, &mut out);
            if let Some(bw) = &layer.bw {
                dir_tensors(bw, &mut out);
            }
        }
        out.push(TensorRef::M(&self.output.w));
        out.push(TensorRef::V(&self.output.b));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<TensorMut<'_>> {
        let mut out = Vec::new();
        for layer in &mut self.layers {
            dir_tensors_mut(&mut layer.fw, &mut out);
            if let Some(bw) = &mut layer.bw {
                dir_tensors_mut(bw, &mut out);
            }
        }
        out.push(TensorMut::M(&mut self.output.w));
        out.push(TensorMut::V(&mut self.output.b));
        out
    }

    pub fn n_parameters(&self) -> usize {
        self.tensors()
            .iter()
            .map(|t| match t {
                TensorRef::M(m) => m.len(),
                TensorRef::V(v) => v.len(),
            })
            .sum()
    }

    /// Identity of this exact parameter state; caches carry it so a
    /// backward pass against mutated parameters is rejected.
    pub fn fingerprint(&self) -> u64 {
        self.revision
    }

    /// Mark the parameters as changed, invalidating outstanding caches.
    pub fn touch(&mut self) {
        self.revision = fresh_revision();
    }
}

impl GradientSet {
    pub fn zeros_like(params: &ModelParams) -> GradientSet {
        let layers = params
            .layers
            .iter()
            .map(|layer| {
                let zero_dir = |w: &LstmWeights| DirGrads {
                    w_x: Array2::zeros(w.w_x.dim()),
                    w_h: Array2::zeros(w.w_h.dim()),
                    b: Array1::zeros(w.b.len()),
                    w_p: w.w_p.as_ref().map(|p| Array2::zeros(p.dim())),
                };
                LayerGrads {
                    fw: zero_dir(&layer.fw),
                    bw: layer.bw.as_ref().map(zero_dir),
                }
            })
            .collect();
        GradientSet {
            loss: 0.0,
            layers,
            out_w: Array2::zeros(params.output.w.dim()),
            out_b: Array1::zeros(params.output.b.len()),
        }
    }

    pub fn tensors(&self) -> Vec<TensorRef<'_>> {
        let mut out = Vec::new();
        for layer in &self.layers {
            fn push_dir<'a>(g: &'a DirGrads, out: &mut Vec<TensorRef<'a>>) {
                out.push(TensorRef::M(&g.w_x));
                out.push(TensorRef::M(&g.w_h));
                out.push(TensorRef::V(&g.b));
                if let Some(p) = &g.w_p {
                    out.push(TensorRef::M(p));
                }
            }
            push_dir(&layer.fw, &mut out);
            if let Some(bw) = &layer.bw {
                push_dir(bw, &mut out);
            }
        }
        out.push(TensorRef::M(&self.out_w));
        out.push(TensorRef::V(&self.out_b));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<TensorMut<'_>> {
        let mut out = Vec::new();
        for layer in &mut self.layers {
            fn push_dir<'a>(g: &'a mut DirGrads, out: &mut Vec<TensorMut<'a>>) {
                out.push(TensorMut::M(&mut g.w_x));
                out.push(TensorMut::M(&mut g.w_h));
                out.push(TensorMut::V(&mut g.b));
                if let Some(p) = &mut g.w_p {
                    out.push(TensorMut::M(p));
                }
            }
            push_dir(&mut layer.fw, &mut out);
            if let Some(bw) = &mut layer.bw {
                push_dir(bw, &mut out);
            }
        }
        out.push(TensorMut::M(&mut self.out_w));
        out.push(TensorMut::V(&mut self.out_b));
        out
    }

    /// Accumulate another gradient set (and its loss) into this one.
    pub fn add(&mut self, other: &GradientSet) {
        self.loss += other.loss;
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            match (a, b) {
                (TensorMut::M(x), TensorRef::M(y)) => *x += y,
                (TensorMut::V(x), TensorRef::V(y)) => *x += y,
                _ => unreachable!("canonical tensor orders differ"),
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.loss *= s;
        for t in self.tensors_mut() {
            match t {
                TensorMut::M(x) => *x *= s,
                TensorMut::V(x) => *x *= s,
            }
        }
    }

    pub fn l2_norm(&self) -> f64 {
        let mut acc = 0.0;
        for t in self.tensors() {
            match t {
                TensorRef::M(x) => acc += x.iter().map(|v| v * v).sum::<f64>(),
                TensorRef::V(x) => acc += x.iter().map(|v| v * v).sum::<f64>(),
            }
        }
        acc.sqrt()
    }

    pub fn is_finite(&self) -> bool {
        if !self.loss.is_finite() {
            return false;
        }
        self.tensors().iter().all(|t| match t {
            TensorRef::M(x) => x.iter().all(|v| v.is_finite()),
            TensorRef::V(x) => x.iter().all(|v| v.is_finite()),
        })
    }
}

/// Draw all weights uniformly from the open interval
/// `(-INIT_RANGE, INIT_RANGE)`; biases start at zero.
pub fn init_params(
    arch: &[LayerSpec],
    input_dim: usize,
    inventory: LabelInventory,
    seed: u64,
) -> Result<ModelParams> {
    if arch.is_empty() {
        return Err(Error::InvalidArchitecture("no layers".into()));
    }
    if input_dim == 0 {
        return Err(Error::InvalidArchitecture(
            "input dimension must be positive".into(),
        ));
    }
    if inventory.is_empty() {
        return Err(Error::InvalidArchitecture("empty label inventory".into()));
    }
    for (i, spec) in arch.iter().enumerate() {
        if spec.cells == 0 {
            return Err(Error::InvalidArchitecture(format!(
                "layer {i} has zero cells"
            )));
        }
        if spec.projection == Some(0) {
            return Err(Error::InvalidArchitecture(format!(
                "layer {i} has zero projection"
            )));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = |m: &mut Array2<f64>| {
        for v in m.iter_mut() {
            // random_range includes the lower bound; redraw to keep the
            // interval open on both sides.
            *v = loop {
                let x = rng.random_range(-INIT_RANGE..INIT_RANGE);
                if x != -INIT_RANGE {
                    break x;
                }
            };
        }
    };

    let mut layers = Vec::with_capacity(arch.len());
    let mut in_dim = input_dim;
    for spec in arch {
        let mut fw = LstmWeights::zeros(in_dim, spec.cells, spec.projection);
        draw(&mut fw.w_x);
        draw(&mut fw.w_h);
        if let Some(p) = &mut fw.w_p {
            draw(p);
        }
        let bw = match spec.direction {
            Direction::Forward => None,
            Direction::Bidirectional => {
                let mut bw = LstmWeights::zeros(in_dim, spec.cells, spec.projection);
                draw(&mut bw.w_x);
                draw(&mut bw.w_h);
                if let Some(p) = &mut bw.w_p {
                    draw(p);
                }
                Some(bw)
            }
        };
        let layer = Layer {
            spec: *spec,
            fw,
            bw,
        };
        in_dim = layer.out_dim();
        layers.push(layer);
    }
    let mut out_w = Array2::zeros((inventory.len(), in_dim));
    draw(&mut out_w);
    Ok(ModelParams {
        input_dim,
        layers,
        output: OutputLayer {
            w: out_w,
            b: Array1::zeros(inventory.len()),
        },
        inventory,
        normalizer: None,
        stack: StackConfig::default(),
        target_delay: 0,
        version: 0,
        revision: fresh_revision(),
    })
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Run one direction of one layer over the input, recording everything
/// the backward pass needs. `reverse` walks time back to front; rows in
/// the cache are always indexed by real frame.
fn lstm_dir_forward(
    w: &LstmWeights,
    input: &Array2<f64>,
    reverse: bool,
    opts: &NnetOptions,
) -> DirCache {
    let t_max = input.nrows();
    let c_dim = w.cells();
    let r_dim = w.out_dim();
    let pre_x = input.dot(&w.w_x.t()); // T x 4C

    let mut cache = DirCache {
        gate_i: Array2::zeros((t_max, c_dim)),
        gate_f: Array2::zeros((t_max, c_dim)),
        gate_g: Array2::zeros((t_max, c_dim)),
        gate_o: Array2::zeros((t_max, c_dim)),
        cell: Array2::zeros((t_max, c_dim)),
        hidden: Array2::zeros((t_max, c_dim)),
        out: Array2::zeros((t_max, r_dim)),
    };

    let mut r_prev = Array1::<f64>::zeros(r_dim);
    let mut c_prev = Array1::<f64>::zeros(c_dim);
    let steps: Vec<usize> = if reverse {
        (0..t_max).rev().collect()
    } else {
        (0..t_max).collect()
    };
    for &t in &steps {
        let a = &pre_x.row(t) + &w.w_h.dot(&r_prev) + &w.b;
        for c in 0..c_dim {
            let i = sigmoid(a[c]);
            let f = sigmoid(a[c_dim + c]);
            let g = a[2 * c_dim + c].tanh();
            let o = sigmoid(a[3 * c_dim + c]);
            let mut cell = f * c_prev[c] + i * g;
            if let Some(clip) = opts.cell_clip {
                cell = cell.clamp(-clip, clip);
            }
            cache.gate_i[[t, c]] = i;
            cache.gate_f[[t, c]] = f;
            cache.gate_g[[t, c]] = g;
            cache.gate_o[[t, c]] = o;
            cache.cell[[t, c]] = cell;
            cache.hidden[[t, c]] = o * cell.tanh();
            c_prev[c] = cell;
        }
        let h = cache.hidden.row(t);
        match &w.w_p {
            Some(p) => cache.out.row_mut(t).assign(&p.dot(&h)),
            None => cache.out.row_mut(t).assign(&h),
        }
        r_prev.assign(&cache.out.row(t));
    }
    cache
}

/// Backward through one direction. `d_out` holds the loss gradient with
/// respect to this direction's emitted rows; returns parameter
/// gradients and the gradient with respect to the layer input.
fn lstm_dir_backward(
    w: &LstmWeights,
    input: &Array2<f64>,
    cache: &DirCache,
    d_out: &Array2<f64>,
    reverse: bool,
    opts: &NnetOptions,
) -> (DirGrads, Array2<f64>) {
    let t_max = input.nrows();
    let c_dim = w.cells();
    let r_dim = w.out_dim();
    let steps: Vec<usize> = if reverse {
        (0..t_max).rev().collect()
    } else {
        (0..t_max).collect()
    };

    let mut d_pre = Array2::<f64>::zeros((t_max, 4 * c_dim));
    let mut d_out_total = Array2::<f64>::zeros((t_max, r_dim));
    let mut d_r_carry = Array1::<f64>::zeros(r_dim);
    let mut d_c_carry = Array1::<f64>::zeros(c_dim);

    for k in (0..t_max).rev() {
        let t = steps[k];
        let prev_cell: Option<ArrayView1<f64>> = if k > 0 {
            Some(cache.cell.row(steps[k - 1]))
        } else {
            None
        };

        let d_out_t = &d_out.row(t) + &d_r_carry;
        d_out_total.row_mut(t).assign(&d_out_t);
        let d_h = match &w.w_p {
            Some(p) => p.t().dot(&d_out_t),
            None => d_out_t,
        };

        for c in 0..c_dim {
            let i = cache.gate_i[[t, c]];
            let f = cache.gate_f[[t, c]];
            let g = cache.gate_g[[t, c]];
            let o = cache.gate_o[[t, c]];
            let tc = cache.cell[[t, c]].tanh();
            let d_o = d_h[c] * tc;
            let mut d_c = d_h[c] * o * (1.0 - tc * tc) + d_c_carry[c];
            if let Some(clip) = opts.cell_grad_clip {
                d_c = d_c.clamp(-clip, clip);
            }
            let c_prev = prev_cell.as_ref().map_or(0.0, |row| row[c]);
            let d_i = d_c * g;
            let d_f = d_c * c_prev;
            let d_g = d_c * i;
            d_pre[[t, c]] = d_i * i * (1.0 - i);
            d_pre[[t, c_dim + c]] = d_f * f * (1.0 - f);
            d_pre[[t, 2 * c_dim + c]] = d_g * (1.0 - g * g);
            d_pre[[t, 3 * c_dim + c]] = d_o * o * (1.0 - o);
            d_c_carry[c] = d_c * f;
        }
        d_r_carry = w.w_h.t().dot(&d_pre.row(t));
    }

    // Recurrent inputs per step: previous step's output, zero at the start.
    let mut r_prev_rows = Array2::<f64>::zeros((t_max, r_dim));
    for k in 1..t_max {
        r_prev_rows
            .row_mut(steps[k])
            .assign(&cache.out.row(steps[k - 1]));
    }

    let grads = DirGrads {
        w_x: d_pre.t().dot(input),
        w_h: d_pre.t().dot(&r_prev_rows),
        b: d_pre.sum_axis(Axis(0)),
        w_p: w.w_p.as_ref().map(|_| d_out_total.t().dot(&cache.hidden)),
    };
    let d_input = d_pre.dot(&w.w_x);
    (grads, d_input)
}

impl ModelParams {
    /// Forward pass with default clipping.
    pub fn forward(&self, feats: &FeatureMatrix) -> Result<(Posteriorgram, ForwardCache)> {
        self.forward_opts(feats, &NnetOptions::default())
    }

    pub fn forward_opts(
        &self,
        feats: &FeatureMatrix,
        opts: &NnetOptions,
    ) -> Result<(Posteriorgram, ForwardCache)> {
        if feats.dim() != self.input_dim {
            return Err(Error::ShapeError(format!(
                "model expects input dim {} but features have {}",
                self.input_dim,
                feats.dim()
            )));
        }
        if feats.n_frames() == 0 {
            return Err(Error::InputTooShort(
                "no frames to run the network on".into(),
            ));
        }
        let mut x = feats.data.clone();
        if let Some(norm) = &self.normalizer {
            if norm.dim() != self.input_dim {
                return Err(Error::ShapeError(format!(
                    "normalizer dim {} does not match input dim {}",
                    norm.dim(),
                    self.input_dim
                )));
            }
            for mut row in x.rows_mut() {
                for (d, v) in row.iter_mut().enumerate() {
                    *v = (*v - norm.mean[d]) * norm.inv_std[d];
                }
            }
        }

        let mut layer_inputs = Vec::with_capacity(self.layers.len());
        let mut layer_caches = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            layer_inputs.push(x.clone());
            let fw = lstm_dir_forward(&layer.fw, &x, false, opts);
            let (next, bw) = match &layer.bw {
                Some(bw_w) => {
                    let bw = lstm_dir_forward(bw_w, &x, true, opts);
                    let mut joined = Array2::zeros((x.nrows(), fw.out.ncols() + bw.out.ncols()));
                    joined.slice_mut(s![.., ..fw.out.ncols()]).assign(&fw.out);
                    joined.slice_mut(s![.., fw.out.ncols()..]).assign(&bw.out);
                    (joined, Some(bw))
                }
                None => (fw.out.clone(), None),
            };
            layer_caches.push(LayerCache { fw, bw });
            x = next;
        }

        let logits = x.dot(&self.output.w.t()) + &self.output.b;
        let probs = softmax_rows(&logits);
        let cache = ForwardCache {
            layer_inputs,
            layers: layer_caches,
            final_hidden: x,
            logits: logits.clone(),
            fingerprint: self.fingerprint(),
        };
        Ok((
            Posteriorgram {
                probs,
                inventory_fingerprint: self.inventory.fingerprint(),
            },
            cache,
        ))
    }

    /// Backpropagate a loss gradient with respect to the logits.
    pub fn backward(&self, cache: &ForwardCache, dlogits: &Array2<f64>) -> Result<GradientSet> {
        self.backward_opts(cache, dlogits, &NnetOptions::default())
    }

    pub fn backward_opts(
        &self,
        cache: &ForwardCache,
        dlogits: &Array2<f64>,
        opts: &NnetOptions,
    ) -> Result<GradientSet> {
        if cache.fingerprint != self.fingerprint() {
            return Err(Error::StaleCache(
                "forward cache was computed with different parameters".into(),
            ));
        }
        if dlogits.dim() != cache.logits.dim() {
            return Err(Error::ShapeError(format!(
                "dlogits shape {:?} does not match logits shape {:?}",
                dlogits.dim(),
                cache.logits.dim()
            )));
        }

        let mut grads = GradientSet::zeros_like(self);
        grads.out_w = dlogits.t().dot(&cache.final_hidden);
        grads.out_b = dlogits.sum_axis(Axis(0));

        let mut d_x = dlogits.dot(&self.output.w);
        for (idx, layer) in self.layers.iter().enumerate().rev() {
            let input = &cache.layer_inputs[idx];
            let lc = &cache.layers[idx];
            match (&layer.bw, &lc.bw) {
                (Some(bw_w), Some(bw_c)) => {
                    let split = layer.fw.out_dim();
                    let d_fw = d_x.slice(s![.., ..split]).to_owned();
                    let d_bw = d_x.slice(s![.., split..]).to_owned();
                    let (g_fw, d_in_fw) =
                        lstm_dir_backward(&layer.fw, input, &lc.fw, &d_fw, false, opts);
                    let (g_bw, d_in_bw) = lstm_dir_backward(bw_w, input, bw_c, &d_bw, true, opts);
                    grads.layers[idx].fw = g_fw;
                    grads.layers[idx].bw = Some(g_bw);
                    d_x = d_in_fw + d_in_bw;
                }
                _ => {
                    let (g_fw, d_in) =
                        lstm_dir_backward(&layer.fw, input, &lc.fw, &d_x, false, opts);
                    grads.layers[idx].fw = g_fw;
                    d_x = d_in;
                }
            }
        }
        Ok(grads)
    }

    /// Momentum SGD step: `v = momentum * v - lr * g; theta += v`.
    pub fn apply_update(
        &mut self,
        velocity: &mut GradientSet,
        grads: &GradientSet,
        learning_rate: f64,
        momentum: f64,
    ) {
        for ((p, v), g) in self
            .tensors_mut()
            .into_iter()
            .zip(velocity.tensors_mut())
            .zip(grads.tensors())
        {
            match (p, v, g) {
                (TensorMut::M(p), TensorMut::M(v), TensorRef::M(g)) => {
                    v.zip_mut_with(g, |v, &g| *v = momentum * *v - learning_rate * g);
                    *p += &*v;
                }
                (TensorMut::V(p), TensorMut::V(v), TensorRef::V(g)) => {
                    v.zip_mut_with(g, |v, &g| *v = momentum * *v - learning_rate * g);
                    *p += &*v;
                }
                _ => unreachable!("canonical tensor orders differ"),
            }
        }
        self.touch();
    }
}

/// Fold a posterior scaling of the blank label into the output bias.
///
/// Dividing the blank posterior by `scale` before decoding is, up to
/// per-frame renormalization that cancels in path comparisons, the same
/// as subtracting `ln scale` from the blank logit. The returned model
/// has `bias_blank += -ln(scale)`.
pub fn bake_blank_scale(params: &ModelParams, scale: f64) -> Result<ModelParams> {
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(Error::InvalidConfig(format!(
            "blank scale must be positive, got {scale}"
        )));
    }
    let blank = params
        .inventory
        .blank_id()
        .ok_or_else(|| Error::NotCtc("cannot bake a blank scale without a blank label".into()))?;
    let mut out = params.clone();
    out.output.b[blank] += -scale.ln();
    out.touch();
    Ok(out)
}

// --- checkpoint io ---

fn w_u32(w: &mut impl Write, v: u32) -> io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn w_f32(w: &mut impl Write, v: f32) -> io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn w_f64(w: &mut impl Write, v: f64) -> io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn r_u32(r: &mut impl Read) -> io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn r_u8(r: &mut impl Read) -> io::Result<u8> {
    let mut b = [0u8; 1];
    r.read_exact(&mut b)?;
    Ok(b[0])
}

fn r_f64(r: &mut impl Read) -> io::Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

fn kind_to_u8(k: InventoryKind) -> u8 {
    match k {
        InventoryKind::CiPhone => 0,
        InventoryKind::CdPhone => 1,
        InventoryKind::Word => 2,
    }
}

fn kind_from_u8(v: u8) -> Result<InventoryKind> {
    match v {
        0 => Ok(InventoryKind::CiPhone),
        1 => Ok(InventoryKind::CdPhone),
        2 => Ok(InventoryKind::Word),
        other => Err(Error::Data(format!("bad inventory kind byte {other}"))),
    }
}

/// Serialize a model. Layout: magic `CTCM1`, format version,
/// architecture and inventory descriptor, frame geometry, optional
/// normalizer, then all parameter tensors as little-endian f32 in
/// canonical order, followed by a full-precision f64 copy of the same
/// tensors so that reloading reproduces the saved model exactly.
pub fn checkpoint_bytes(params: &ModelParams) -> Vec<u8> {
    let mut w: Vec<u8> = Vec::new();
    w.extend_from_slice(CHECKPOINT_MAGIC);
    w_u32(&mut w, 1).unwrap();
    w_u32(&mut w, params.version).unwrap();
    w_u32(&mut w, params.input_dim as u32).unwrap();

    let inv = &params.inventory;
    w.push(kind_to_u8(inv.kind()));
    w_u32(&mut w, inv.len() as u32).unwrap();
    for name in inv.names() {
        w_u32(&mut w, name.len() as u32).unwrap();
        w.extend_from_slice(name.as_bytes());
    }

    w_u32(&mut w, params.layers.len() as u32).unwrap();
    for layer in &params.layers {
        w_u32(&mut w, layer.spec.cells as u32).unwrap();
        w.push(match layer.spec.direction {
            Direction::Forward => 0,
            Direction::Bidirectional => 1,
        });
        w_u32(&mut w, layer.spec.projection.unwrap_or(0) as u32).unwrap();
    }

    w_u32(&mut w, params.stack.stack as u32).unwrap();
    w_u32(&mut w, params.stack.skip as u32).unwrap();
    w.push(params.stack.replicate_edges as u8);
    w_u32(&mut w, params.target_delay as u32).unwrap();

    match &params.normalizer {
        Some(n) => {
            w.push(1);
            w_u32(&mut w, n.dim() as u32).unwrap();
            for &v in &n.mean {
                w_f64(&mut w, v).unwrap();
            }
            for &v in &n.inv_std {
                w_f64(&mut w, v).unwrap();
            }
        }
        None => w.push(0),
    }

    for t in params.tensors() {
        match t {
            TensorRef::M(m) => {
                for &v in m.iter() {
                    w_f32(&mut w, v as f32).unwrap();
                }
            }
            TensorRef::V(v) => {
                for &x in v.iter() {
                    w_f32(&mut w, x as f32).unwrap();
                }
            }
        }
    }
    for t in params.tensors() {
        match t {
            TensorRef::M(m) => {
                for &v in m.iter() {
                    w_f64(&mut w, v).unwrap();
                }
            }
            TensorRef::V(v) => {
                for &x in v.iter() {
                    w_f64(&mut w, x).unwrap();
                }
            }
        }
    }
    w
}

/// Write a checkpoint atomically (temp file in the same directory, then
/// rename).
pub fn save_checkpoint(path: &Path, params: &ModelParams) -> Result<()> {
    let bytes = checkpoint_bytes(params);
    let tmp = path.with_extension(format!("tmp.{}", std::process::id()));
    fs::write(&tmp, &bytes).map_err(|e| Error::io(tmp.display().to_string(), e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<ModelParams> {
    let bytes = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    parse_checkpoint(&bytes).map_err(|e| match e {
        Error::Data(msg) => Error::Data(format!("{}: {msg}", path.display())),
        other => other,
    })
}

pub fn parse_checkpoint(bytes: &[u8]) -> Result<ModelParams> {
    let mut r = bytes;
    let bad = |msg: &str| Error::Data(msg.to_string());
    let trunc = |_: io::Error| Error::Data("truncated checkpoint".to_string());

    let mut magic = [0u8; 5];
    r.read_exact(&mut magic).map_err(trunc)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(bad("bad magic, not a CTCM1 checkpoint"));
    }
    let format_version = r_u32(&mut r).map_err(trunc)?;
    if format_version != 1 {
        return Err(bad(&format!(
            "unsupported checkpoint format version {format_version}"
        )));
    }
    let version = r_u32(&mut r).map_err(trunc)?;
    let input_dim = r_u32(&mut r).map_err(trunc)? as usize;

    let kind = kind_from_u8(r_u8(&mut r).map_err(trunc)?)?;
    let n_labels = r_u32(&mut r).map_err(trunc)? as usize;
    let mut names = Vec::with_capacity(n_labels);
    for _ in 0..n_labels {
        let len = r_u32(&mut r).map_err(trunc)? as usize;
        if len > 1 << 20 {
            return Err(bad("label name length out of range"));
        }
        let mut buf = vec![0u8; len];
        r.read_exact(&mut buf).map_err(trunc)?;
        names.push(String::from_utf8(buf).map_err(|_| bad("label name is not utf8"))?);
    }
    let inventory = LabelInventory::from_names(names, kind)?;

    let n_layers = r_u32(&mut r).map_err(trunc)? as usize;
    let mut arch = Vec::with_capacity(n_layers);
    for _ in 0..n_layers {
        let cells = r_u32(&mut r).map_err(trunc)? as usize;
        let direction = match r_u8(&mut r).map_err(trunc)? {
            0 => Direction::Forward,
            1 => Direction::Bidirectional,
            other => return Err(bad(&format!("bad direction byte {other}"))),
        };
        let proj = r_u32(&mut r).map_err(trunc)? as usize;
        arch.push(LayerSpec {
            cells,
            direction,
            projection: if proj == 0 { None } else { Some(proj) },
        });
    }

    let stack = r_u32(&mut r).map_err(trunc)? as usize;
    let skip = r_u32(&mut r).map_err(trunc)? as usize;
    let replicate_edges = r_u8(&mut r).map_err(trunc)? != 0;
    let target_delay = r_u32(&mut r).map_err(trunc)? as usize;

    let normalizer = match r_u8(&mut r).map_err(trunc)? {
        0 => None,
        1 => {
            let dim = r_u32(&mut r).map_err(trunc)? as usize;
            let mut mean = Vec::with_capacity(dim);
            for _ in 0..dim {
                mean.push(r_f64(&mut r).map_err(trunc)?);
            }
            let mut inv_std = Vec::with_capacity(dim);
            for _ in 0..dim {
                inv_std.push(r_f64(&mut r).map_err(trunc)?);
            }
            Some(FeatureNormalizer { mean, inv_std })
        }
        other => return Err(bad(&format!("bad normalizer flag {other}"))),
    };

    let mut params = init_params(&arch, input_dim, inventory, 0)?;
    params.version = version;
    params.normalizer = normalizer;
    params.stack = StackConfig {
        stack,
        skip,
        replicate_edges,
    };
    params.target_delay = target_delay;

    // Skip the f32 section, then read the full-precision copy.
    let n_params = params.n_parameters();
    if r.len() < n_params * 4 {
        return Err(bad("truncated tensor section"));
    }
    r = &r[n_params * 4..];
    if r.len() != n_params * 8 {
        return Err(bad(&format!(
            "tensor payload is {} bytes but the descriptor implies {}",
            r.len(),
            n_params * 8
        )));
    }
    for t in params.tensors_mut() {
        match t {
            TensorMut::M(m) => {
                for v in m.iter_mut() {
                    *v = r_f64(&mut r).map_err(trunc)?;
                }
            }
            TensorMut::V(vec) => {
                for v in vec.iter_mut() {
                    *v = r_f64(&mut r).map_err(trunc)?;
                }
            }
        }
    }
    params.touch();
    Ok(params)
}

/// Read just the f32 tensor section of a checkpoint (the portable
/// representation), for tests that pin the external layout.
pub fn checkpoint_f32_tensors(bytes: &[u8]) -> Result<Vec<f32>> {
    let params = parse_checkpoint(bytes)?;
    let n_params = params.n_parameters();
    let tail = &bytes[bytes.len() - n_params * 12..];
    Ok(tail[..n_params * 4]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graphs::InventoryKind;
    use approx::assert_abs_diff_eq;

    fn toy_inventory(n: usize) -> LabelInventory {
        let names: Vec<String> = (0..n).map(|i| format!("l{i}")).collect();
        LabelInventory::from_names(names, InventoryKind::CiPhone)
            .unwrap()
            .with_blank()
            .unwrap()
    }

    fn feat(t: usize, d: usize, seed: u64) -> FeatureMatrix {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        FeatureMatrix {
            data: Array2::from_shape_fn((t, d), |_| rng.random_range(-1.0..1.0)),
            frame_shift_ms: 10.0,
            window_ms: 25.0,
        }
    }

    fn small_arch() -> Vec<LayerSpec> {
        vec![
            LayerSpec {
                cells: 5,
                direction: Direction::Bidirectional,
                projection: Some(3),
            },
            LayerSpec {
                cells: 4,
                direction: Direction::Forward,
                projection: None,
            },
        ]
    }

    #[test]
    fn init_is_deterministic_and_bounded() {
        let a = init_params(&small_arch(), 6, toy_inventory(3), 42).unwrap();
        let b = init_params(&small_arch(), 6, toy_inventory(3), 42).unwrap();
        let c = init_params(&small_arch(), 6, toy_inventory(3), 43).unwrap();
        let flat = |p: &ModelParams| -> Vec<f64> {
            p.tensors()
                .iter()
                .flat_map(|t| match t {
                    TensorRef::M(m) => m.iter().cloned().collect::<Vec<_>>(),
                    TensorRef::V(v) => v.iter().cloned().collect::<Vec<_>>(),
                })
                .collect()
        };
        assert_eq!(flat(&a), flat(&b));
        assert_ne!(flat(&a), flat(&c));
        for layer in &a.layers {
            for w in [&layer.fw.w_x, &layer.fw.w_h] {
                for &v in w.iter() {
                    assert!(v > -INIT_RANGE && v < INIT_RANGE, "weight {v} out of band");
                }
            }
            assert!(layer.fw.b.iter().all(|&v| v == 0.0));
        }
        assert!(a.output.b.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn presets_have_the_documented_shapes() {
        let uni = arch_preset("ctc-uni").unwrap();
        assert_eq!(uni.len(), 5);
        assert!(uni.iter().all(|l| l.cells == 500
            && l.direction == Direction::Forward
            && l.projection.is_none()));
        let bi = arch_preset("ctc-bi").unwrap();
        assert!(bi
            .iter()
            .all(|l| l.cells == 300 && l.direction == Direction::Bidirectional));
        let conv = arch_preset("conv-uni").unwrap();
        assert_eq!(conv.len(), 2);
        assert!(conv
            .iter()
            .all(|l| l.cells == 1000 && l.projection == Some(512)));
        assert!(arch_preset("huge").is_err());
    }

    #[test]
    fn zero_weights_give_uniform_posteriors() {
        let mut m = init_params(&small_arch(), 6, toy_inventory(3), 1).unwrap();
        for t in m.tensors_mut() {
            match t {
                TensorMut::M(x) => x.fill(0.0),
                TensorMut::V(x) => x.fill(0.0),
            }
        }
        m.touch();
        let (post, _) = m.forward(&feat(4, 6, 2)).unwrap();
        for row in post.probs.rows() {
            for &v in row {
                assert_abs_diff_eq!(v, 0.25, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn posterior_rows_sum_to_one() {
        let m = init_params(&small_arch(), 6, toy_inventory(5), 7).unwrap();
        let (post, _) = m.forward(&feat(9, 6, 3)).unwrap();
        for row in post.probs.rows() {
            assert_abs_diff_eq!(row.sum(), 1.0, epsilon = 1e-6);
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let m = init_params(&small_arch(), 6, toy_inventory(4), 9).unwrap();
        let f = feat(7, 6, 4);
        let (a, _) = m.forward(&f).unwrap();
        let (b, _) = m.forward(&f).unwrap();
        assert_eq!(a.probs, b.probs);
    }

    #[test]
    fn cell_clip_saturates_at_the_bound() {
        // One cell driven to add 1 per frame: gates pinned open with huge
        // biases, cell input tanh saturated at 1.
        let inv = toy_inventory(1);
        let arch = [LayerSpec {
            cells: 1,
            direction: Direction::Forward,
            projection: None,
        }];
        let mut m = init_params(&arch, 1, inv, 0).unwrap();
        for t in m.tensors_mut() {
            match t {
                TensorMut::M(x) => x.fill(0.0),
                TensorMut::V(x) => x.fill(0.0),
            }
        }
        m.layers[0].fw.b[0] = 100.0; // input gate open
        m.layers[0].fw.b[1] = 100.0; // forget gate open
        m.layers[0].fw.b[2] = 100.0; // cell input at tanh(100) = 1
        m.touch();
        let f = FeatureMatrix {
            data: Array2::zeros((8, 1)),
            frame_shift_ms: 10.0,
            window_ms: 25.0,
        };
        let opts = NnetOptions {
            cell_clip: Some(5.0),
            cell_grad_clip: None,
        };
        let (_, cache) = m.forward_opts(&f, &opts).unwrap();
        for t in 0..8 {
            let want = ((t + 1) as f64).min(5.0);
            assert_abs_diff_eq!(cache.layers[0].fw.cell[[t, 0]], want, epsilon = 1e-9);
        }
        // Unclipped the cell keeps integrating.
        let (_, cache) = m.forward_opts(&f, &NnetOptions::unclipped()).unwrap();
        assert_abs_diff_eq!(cache.layers[0].fw.cell[[7, 0]], 8.0, epsilon = 1e-9);
    }

    #[test]
    fn unidirectional_output_is_causal() {
        let arch = [
            LayerSpec {
                cells: 6,
                direction: Direction::Forward,
                projection: None,
            },
            LayerSpec {
                cells: 4,
                direction: Direction::Forward,
                projection: Some(3),
            },
        ];
        let m = init_params(&arch, 5, toy_inventory(3), 11).unwrap();
        let base = feat(8, 5, 5);
        let (post_a, _) = m.forward(&base).unwrap();
        let mut bumped = base.clone();
        bumped.data[[4, 2]] += 1.0;
        let (post_b, _) = m.forward(&bumped).unwrap();
        for t in 0..4 {
            for l in 0..post_a.probs.ncols() {
                assert_eq!(
                    post_a.probs[[t, l]],
                    post_b.probs[[t, l]],
                    "frame {t} changed"
                );
            }
        }
        assert_ne!(post_a.probs.row(4), post_b.probs.row(4));
    }

    #[test]
    fn bidirectional_output_sees_the_future() {
        let m = init_params(
            &[LayerSpec {
                cells: 4,
                direction: Direction::Bidirectional,
                projection: None,
            }],
            3,
            toy_inventory(2),
            13,
        )
        .unwrap();
        let base = feat(6, 3, 6);
        let (post_a, _) = m.forward(&base).unwrap();
        let mut bumped = base.clone();
        bumped.data[[5, 0]] += 1.0;
        let (post_b, _) = m.forward(&bumped).unwrap();
        assert_ne!(post_a.probs.row(0), post_b.probs.row(0));
    }

    #[test]
    fn bidirectional_halves_mirror_under_time_reversal() {
        // With identical forward and backward weights, reversing the
        // input reverses the output rows and swaps the two column halves.
        let mut m = init_params(
            &[LayerSpec {
                cells: 4,
                direction: Direction::Bidirectional,
                projection: Some(2),
            }],
            3,
            toy_inventory(2),
            17,
        )
        .unwrap();
        m.layers[0].bw = Some(m.layers[0].fw.clone());
        m.touch();
        let f = feat(5, 3, 7);
        let mut rev = f.clone();
        rev.data = ndarray::Array2::from_shape_fn(f.data.dim(), |(t, d)| {
            f.data[[f.data.nrows() - 1 - t, d]]
        });
        let (_, cache_f) = m.forward(&f).unwrap();
        let (_, cache_r) = m.forward(&rev).unwrap();
        let h_f = &cache_f.final_hidden;
        let h_r = &cache_r.final_hidden;
        let half = 2;
        for t in 0..5 {
            for d in 0..half {
                assert_abs_diff_eq!(h_f[[t, d]], h_r[[4 - t, half + d]], epsilon = 1e-12);
                assert_abs_diff_eq!(h_f[[t, half + d]], h_r[[4 - t, d]], epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        use rand::Rng;
        let arch = [
            LayerSpec {
                cells: 4,
                direction: Direction::Bidirectional,
                projection: Some(3),
            },
            LayerSpec {
                cells: 3,
                direction: Direction::Forward,
                projection: None,
            },
        ];
        let mut m = init_params(&arch, 4, toy_inventory(3), 21).unwrap();
        let f = feat(5, 4, 8);
        let opts = NnetOptions::unclipped();

        // Objective: sum of logits weighted by a fixed random mask, so
        // dloss/dlogits equals the mask exactly.
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let (_, cache) = m.forward_opts(&f, &opts).unwrap();
        let mask = Array2::from_shape_fn(cache.logits.dim(), |_| rng.random_range(-1.0..1.0));
        let grads = m.backward_opts(&cache, &mask, &opts).unwrap();

        let objective = |m: &ModelParams| -> f64 {
            let (_, c) = m.forward_opts(&f, &opts).unwrap();
            (&c.logits * &mask).sum()
        };

        let analytic: Vec<f64> = grads
            .tensors()
            .iter()
            .flat_map(|t| match t {
                TensorRef::M(x) => x.iter().cloned().collect::<Vec<_>>(),
                TensorRef::V(x) => x.iter().cloned().collect::<Vec<_>>(),
            })
            .collect();

        let h = 1e-5;
        let mut idx = 0;
        let mut worst: f64 = 0.0;
        let n_tensors = m.tensors().len();
        for ti in 0..n_tensors {
            let len = match &m.tensors()[ti] {
                TensorRef::M(x) => x.len(),
                TensorRef::V(x) => x.len(),
            };
            for k in 0..len {
                let read = |m: &mut ModelParams, delta: f64| -> f64 {
                    {
                        let mut ts = m.tensors_mut();
                        match &mut ts[ti] {
                            TensorMut::M(x) => {
                                *x.iter_mut().nth(k).unwrap() += delta;
                            }
                            TensorMut::V(x) => {
                                x[k] += delta;
                            }
                        }
                    }
                    m.touch();
                    objective(m)
                };
                let up = read(&mut m, h);
                let down = read(&mut m, -2.0 * h);
                read(&mut m, h); // restore
                let fd = (up - down) / (2.0 * h);
                let a = analytic[idx];
                let rel = (fd - a).abs() / fd.abs().max(a.abs()).max(1e-8);
                worst = worst.max(rel);
                idx += 1;
            }
        }
        assert_eq!(idx, analytic.len());
        assert!(worst < 1e-5, "worst relative gradient error {worst}");
    }

    #[test]
    fn cell_gradient_clip_limits_the_backward_signal() {
        // Zero weights make the algebra exact: g = 0, i = o = 0.5,
        // cell = 0, tanh(cell) = 0. With dlogit k on the only output and
        // output weight w, d_cell = k * w * o. We pick k * w = 200 so the
        // unclipped cell signal is 100 and the clipped one is exactly 1.
        let inv = LabelInventory::from_names(vec!["x".into()], InventoryKind::CiPhone).unwrap();
        let arch = [LayerSpec {
            cells: 1,
            direction: Direction::Forward,
            projection: None,
        }];
        let mut m = init_params(&arch, 1, inv, 0).unwrap();
        for t in m.tensors_mut() {
            match t {
                TensorMut::M(x) => x.fill(0.0),
                TensorMut::V(x) => x.fill(0.0),
            }
        }
        m.output.w[[0, 0]] = 2.0;
        m.touch();
        let f = FeatureMatrix {
            data: Array2::from_elem((1, 1), 3.0),
            frame_shift_ms: 10.0,
            window_ms: 25.0,
        };
        let dlogits = Array2::from_elem((1, 1), 100.0);

        let clipped = {
            let opts = NnetOptions {
                cell_clip: None,
                cell_grad_clip: Some(1.0),
            };
            let (_, cache) = m.forward_opts(&f, &opts).unwrap();
            m.backward_opts(&cache, &dlogits, &opts).unwrap()
        };
        let open = {
            let opts = NnetOptions::unclipped();
            let (_, cache) = m.forward_opts(&f, &opts).unwrap();
            m.backward_opts(&cache, &dlogits, &opts).unwrap()
        };
        // Cell-input gate row of w_x: d pre_g = d_cell * i * (1 - g^2)
        //                                     = d_cell * 0.5, times x = 3.
        let g_row = 2; // rows: i, f, g, o
        assert_abs_diff_eq!(open.layers[0].fw.w_x[[g_row, 0]], 100.0 * 0.5 * 3.0);
        assert_abs_diff_eq!(clipped.layers[0].fw.w_x[[g_row, 0]], 1.0 * 0.5 * 3.0);
        // The output-gate path bypasses the cell and is untouched by the clip.
        assert_abs_diff_eq!(
            open.layers[0].fw.w_x[[3, 0]],
            clipped.layers[0].fw.w_x[[3, 0]]
        );
    }

    #[test]
    fn zero_dlogits_give_zero_grads() {
        let m = init_params(&small_arch(), 6, toy_inventory(3), 23).unwrap();
        let f = feat(4, 6, 9);
        let (_, cache) = m.forward(&f).unwrap();
        let grads = m
            .backward(&cache, &Array2::zeros(cache.logits.dim()))
            .unwrap();
        assert_eq!(grads.l2_norm(), 0.0);
        assert!(grads.is_finite());
    }

    #[test]
    fn stale_cache_is_rejected() {
        let mut m = init_params(&small_arch(), 6, toy_inventory(3), 25).unwrap();
        let f = feat(4, 6, 10);
        let (_, cache) = m.forward(&f).unwrap();
        let dlogits = Array2::zeros(cache.logits.dim());
        let mut v = GradientSet::zeros_like(&m);
        let g = GradientSet::zeros_like(&m);
        m.apply_update(&mut v, &g, 0.1, 0.9); // even a no-op step invalidates
        assert!(matches!(
            m.backward(&cache, &dlogits).unwrap_err(),
            Error::StaleCache(_)
        ));
    }

    #[test]
    fn shape_mismatches_are_rejected() {
        let m = init_params(&small_arch(), 6, toy_inventory(3), 27).unwrap();
        assert!(matches!(
            m.forward(&feat(4, 5, 11)).unwrap_err(),
            Error::ShapeError(_)
        ));
        let (_, cache) = m.forward(&feat(4, 6, 11)).unwrap();
        assert!(matches!(
            m.backward(&cache, &Array2::zeros((4, 2))).unwrap_err(),
            Error::ShapeError(_)
        ));
    }

    #[test]
    fn momentum_update_follows_the_recurrence() {
        let inv = LabelInventory::from_names(vec!["x".into()], InventoryKind::CiPhone).unwrap();
        let arch = [LayerSpec {
            cells: 1,
            direction: Direction::Forward,
            projection: None,
        }];
        let mut m = init_params(&arch, 1, inv, 3).unwrap();
        let theta0 = m.output.w[[0, 0]];
        let mut v = GradientSet::zeros_like(&m);
        let mut g = GradientSet::zeros_like(&m);
        g.out_w[[0, 0]] = 2.0;
        m.apply_update(&mut v, &g, 0.1, 0.9);
        // v1 = -0.2, theta1 = theta0 - 0.2
        assert_abs_diff_eq!(m.output.w[[0, 0]], theta0 - 0.2, epsilon = 1e-15);
        m.apply_update(&mut v, &g, 0.1, 0.9);
        // v2 = 0.9 * -0.2 - 0.2 = -0.38
        assert_abs_diff_eq!(m.output.w[[0, 0]], theta0 - 0.58, epsilon = 1e-15);
    }

    #[test]
    fn blank_scale_bakes_into_the_bias() {
        let m = init_params(&small_arch(), 6, toy_inventory(3), 29).unwrap();
        let blank = m.inventory.blank_id().unwrap();
        let b0 = m.output.b[blank];

        let same = bake_blank_scale(&m, 1.0).unwrap();
        assert_eq!(same.output.b[blank], b0);

        let scaled = bake_blank_scale(&m, std::f64::consts::E).unwrap();
        assert_abs_diff_eq!(scaled.output.b[blank], b0 - 1.0, epsilon = 1e-15);

        // Baked posteriors equal scaled-and-renormalized original ones.
        let f = feat(5, 6, 12);
        let (orig, _) = m.forward(&f).unwrap();
        let (baked, _) = scaled.forward(&f).unwrap();
        for t in 0..5 {
            let mut scaled_row: Vec<f64> = orig.probs.row(t).to_vec();
            scaled_row[blank] /= std::f64::consts::E;
            let z: f64 = scaled_row.iter().sum();
            for (l, &v) in scaled_row.iter().enumerate() {
                assert_abs_diff_eq!(baked.probs[[t, l]], v / z, epsilon = 1e-12);
            }
        }

        let no_blank = init_params(
            &small_arch(),
            6,
            LabelInventory::from_names(vec!["a".into()], InventoryKind::CiPhone).unwrap(),
            1,
        )
        .unwrap();
        assert!(matches!(
            bake_blank_scale(&no_blank, 2.0).unwrap_err(),
            Error::NotCtc(_)
        ));
        assert!(matches!(
            bake_blank_scale(&m, 0.0).unwrap_err(),
            Error::InvalidConfig(_)
        ));
    }

    #[test]
    fn checkpoint_round_trip_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ctcm");
        let mut m = init_params(&small_arch(), 6, toy_inventory(3), 31).unwrap();
        m.normalizer = Some(FeatureNormalizer {
            mean: vec![0.1; 6],
            inv_std: vec![1.3; 6],
        });
        m.stack = StackConfig {
            stack: 8,
            skip: 3,
            replicate_edges: true,
        };
        m.target_delay = 5;
        m.version = 2;
        save_checkpoint(&path, &m).unwrap();
        let back = load_checkpoint(&path).unwrap();

        assert_eq!(back.version, 2);
        assert_eq!(back.target_delay, 5);
        assert_eq!(back.stack.stack, 8);
        assert_eq!(back.stack.skip, 3);
        assert_eq!(back.inventory, m.inventory);
        assert_eq!(back.normalizer, m.normalizer);

        let f = feat(5, 6, 13);
        let (post_a, _) = m.forward(&f).unwrap();
        let (post_b, _) = back.forward(&f).unwrap();
        assert_eq!(post_a.probs, post_b.probs);

        // Saving the reloaded model reproduces the file byte for byte.
        let bytes_a = checkpoint_bytes(&m);
        let bytes_b = checkpoint_bytes(&back);
        assert_eq!(bytes_a, bytes_b);

        // The f32 section carries the same values at reduced precision.
        let f32s = checkpoint_f32_tensors(&bytes_a).unwrap();
        assert_eq!(f32s.len(), m.n_parameters());
        let first = match &m.tensors()[0] {
            TensorRef::M(x) => x[[0, 0]],
            TensorRef::V(x) => x[0],
        };
        assert_abs_diff_eq!(f32s[0] as f64, first, epsilon = 1e-7);
    }

    #[test]
    fn checkpoint_rejects_corruption() {
        let m = init_params(&small_arch(), 6, toy_inventory(3), 37).unwrap();
        let mut bytes = checkpoint_bytes(&m);
        assert!(matches!(
            parse_checkpoint(&bytes[..40]).unwrap_err(),
            Error::Data(_)
        ));
        bytes[0] = b'X';
        assert!(matches!(
            parse_checkpoint(&bytes).unwrap_err(),
            Error::Data(_)
        ));
        let bytes = checkpoint_bytes(&m);
        assert!(matches!(
            parse_checkpoint(&bytes[..bytes.len() - 3]).unwrap_err(),
            Error::Data(_)
        ));
    }
}
