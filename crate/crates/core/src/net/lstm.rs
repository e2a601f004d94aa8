//! Batched forward evaluation and backpropagation through time.
//!
//! Activations are stored column-per-sample: every time step is a
//! `features × batch` matrix. Gate rows are ordered input, forget, candidate, output.

use nalgebra::DMatrix;

use super::model::{Gradients, PredictorModel};
use crate::error::NetError;

/// Normalized inputs (one `F × B` matrix per time step) and optional normalized targets.
#[derive(Debug, Clone)]
pub struct Batch {
    pub steps: Vec<DMatrix<f64>>,
    pub targets: Option<DMatrix<f64>>,
}

impl Batch {
    pub fn size(&self) -> usize {
        self.steps.first().map_or(0, |s| s.ncols())
    }

    /// Builds a batch from raw windows (`k × F`, one row per step) and optional
    /// raw targets (`N × d`), normalizing with the model's statistics.
    pub fn from_windows(
        model: &PredictorModel,
        windows: &[&DMatrix<f64>],
        targets: Option<&[&DMatrix<f64>]>,
    ) -> Result<Self, NetError> {
        let cfg = &model.config;
        let (k, f) = (cfg.window_k, cfg.input_features);
        for w in windows {
            if w.nrows() != k {
                return Err(NetError::Shape {
                    what: "window rows (time steps)".into(),
                    expected: k,
                    got: w.nrows(),
                });
            }
            if w.ncols() != f {
                return Err(NetError::Shape {
                    what: "window columns (features)".into(),
                    expected: f,
                    got: w.ncols(),
                });
            }
        }
        let b = windows.len();
        let norm = &model.norm;
        let steps = (0..k)
            .map(|t| {
                DMatrix::from_fn(f, b, |j, s| {
                    (windows[s][(t, j)] - norm.input_mean[j]) / norm.input_scale[j]
                })
            })
            .collect();
        let targets = match targets {
            None => None,
            Some(ts) => {
                let (n, d) = (cfg.horizon_n, cfg.dof);
                for t in ts {
                    if t.nrows() != n {
                        return Err(NetError::Shape {
                            what: "target rows (horizon)".into(),
                            expected: n,
                            got: t.nrows(),
                        });
                    }
                    if t.ncols() != d {
                        return Err(NetError::Shape {
                            what: "target columns (dof)".into(),
                            expected: d,
                            got: t.ncols(),
                        });
                    }
                }
                Some(DMatrix::from_fn(n * d, ts.len(), |o, s| {
                    let axis = o % d;
                    (ts[s][(o / d, axis)] - norm.output_mean[axis]) / norm.output_scale[axis]
                }))
            }
        };
        Ok(Batch { steps, targets })
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

struct LayerTrace {
    /// Activated gates `[i; f; g; o]` per step.
    gates: Vec<DMatrix<f64>>,
    cells: Vec<DMatrix<f64>>,
    tanh_cells: Vec<DMatrix<f64>>,
    hidden: Vec<DMatrix<f64>>,
}

struct HeadTrace {
    features: DMatrix<f64>,
    activated: DMatrix<f64>,
    output: DMatrix<f64>,
}

fn run_layer(
    w_in: &DMatrix<f64>,
    w_rec: &DMatrix<f64>,
    bias: &DMatrix<f64>,
    inputs: &[DMatrix<f64>],
    keep: bool,
) -> LayerTrace {
    let h = w_rec.ncols();
    let b = inputs[0].ncols();
    let mut trace = LayerTrace {
        gates: Vec::with_capacity(inputs.len()),
        cells: Vec::with_capacity(inputs.len()),
        tanh_cells: Vec::with_capacity(inputs.len()),
        hidden: Vec::with_capacity(inputs.len()),
    };
    let mut h_prev = DMatrix::<f64>::zeros(h, b);
    let mut c_prev = DMatrix::<f64>::zeros(h, b);
    for x in inputs {
        let mut g = w_in * x;
        g.gemm(1.0, w_rec, &h_prev, 1.0);
        let mut c = DMatrix::<f64>::zeros(h, b);
        let mut tc = DMatrix::<f64>::zeros(h, b);
        let mut hn = DMatrix::<f64>::zeros(h, b);
        for s in 0..b {
            let gs = &mut g.as_mut_slice()[s * 4 * h..(s + 1) * 4 * h];
            for (r, v) in gs.iter_mut().enumerate() {
                let z = *v + bias[r];
                *v = if (2 * h..3 * h).contains(&r) {
                    z.tanh()
                } else {
                    sigmoid(z)
                };
            }
            for j in 0..h {
                let (ig, fg, cg, og) = (gs[j], gs[h + j], gs[2 * h + j], gs[3 * h + j]);
                let cv = fg * c_prev[(j, s)] + ig * cg;
                let tv = cv.tanh();
                c[(j, s)] = cv;
                tc[(j, s)] = tv;
                hn[(j, s)] = og * tv;
            }
        }
        if keep {
            trace.gates.push(g);
            trace.cells.push(c.clone());
            trace.tanh_cells.push(tc);
            trace.hidden.push(hn.clone());
        } else {
            trace.hidden.clear();
            trace.hidden.push(hn.clone());
        }
        h_prev = hn;
        c_prev = c;
    }
    trace
}

fn run_head(model: &PredictorModel, features: DMatrix<f64>) -> HeadTrace {
    let [w1, b1, w2, b2] = model.head();
    let mut a = w1 * &features;
    for s in 0..a.ncols() {
        for r in 0..a.nrows() {
            a[(r, s)] = (a[(r, s)] + b1[r]).tanh();
        }
    }
    let mut out = w2 * &a;
    for s in 0..out.ncols() {
        for r in 0..out.nrows() {
            out[(r, s)] += b2[r];
        }
    }
    HeadTrace {
        features,
        activated: a,
        output: out,
    }
}

/// Top-layer hidden state after the last step, `hidden × B`.
pub(crate) fn final_hidden(model: &PredictorModel, steps: &[DMatrix<f64>]) -> DMatrix<f64> {
    let mut inputs: Vec<DMatrix<f64>> = steps.to_vec();
    let layers = model.config.recurrent_layers;
    for l in 0..layers {
        let (w_in, w_rec, bias) = model.layer(l);
        let keep = l + 1 < layers;
        let trace = run_layer(w_in, w_rec, bias, &inputs, keep);
        inputs = trace.hidden;
    }
    inputs.pop().expect("non-empty window")
}

/// Normalized network output, `output_size × B`.
pub fn forward_normalized(model: &PredictorModel, batch: &Batch) -> DMatrix<f64> {
    run_head(model, final_hidden(model, &batch.steps)).output
}

/// Converts normalized outputs into physical positions, one `N × d` list per sample.
pub fn denormalize(model: &PredictorModel, out: &DMatrix<f64>) -> Vec<Vec<Vec<f64>>> {
    let (n, d) = (model.config.horizon_n, model.config.dof);
    let norm = &model.norm;
    (0..out.ncols())
        .map(|s| {
            (0..n)
                .map(|j| {
                    (0..d)
                        .map(|a| out[(j * d + a, s)] * norm.output_scale[a] + norm.output_mean[a])
                        .collect()
                })
                .collect()
        })
        .collect()
}

/// Predicted positions (`N` rows of `d`) for one raw window of `k × 4d`.
pub fn forward(model: &PredictorModel, window: &DMatrix<f64>) -> Result<Vec<Vec<f64>>, NetError> {
    let batch = Batch::from_windows(model, &[window], None)?;
    Ok(denormalize(model, &forward_normalized(model, &batch)).remove(0))
}

/// Batched form of [`forward`].
pub fn forward_many(model: &PredictorModel, windows: &[&DMatrix<f64>]) -> Result<Vec<Vec<Vec<f64>>>, NetError> {
    if windows.is_empty() {
        return Ok(Vec::new());
    }
    let batch = Batch::from_windows(model, windows, None)?;
    Ok(denormalize(model, &forward_normalized(model, &batch)))
}

fn first_nonfinite_sample(out: &DMatrix<f64>, targets: &DMatrix<f64>) -> Option<usize> {
    (0..out.ncols()).find(|&s| {
        !(0..out.nrows())
            .map(|r| (out[(r, s)] - targets[(r, s)]).powi(2))
            .sum::<f64>()
            .is_finite()
    })
}

/// Mean squared error of the head output and the gradients of the head blocks.
/// Returns the gradient with respect to the head input.
fn head_backward(
    model: &PredictorModel,
    trace: &HeadTrace,
    targets: &DMatrix<f64>,
    grads: &mut Gradients,
) -> (f64, DMatrix<f64>) {
    let count = (trace.output.nrows() * trace.output.ncols()) as f64;
    let diff = &trace.output - targets;
    let loss = diff.norm_squared() / count;
    let d_out = diff * (2.0 / count);
    let o = model.config.recurrent_block_count();
    let [w1, _, w2, _] = model.head();

    grads.0[o + 2] = &d_out * trace.activated.transpose();
    grads.0[o + 3] = row_sums(&d_out);
    let mut d_a = w2.tr_mul(&d_out);
    d_a.zip_apply(&trace.activated, |g, a| *g *= 1.0 - a * a);
    grads.0[o] = &d_a * trace.features.transpose();
    grads.0[o + 1] = row_sums(&d_a);
    (loss, w1.tr_mul(&d_a))
}

fn row_sums(m: &DMatrix<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(m.nrows(), 1, |r, _| m.row(r).sum())
}

/// Loss and full gradients on a prepared batch. Frozen blocks still get gradients.
pub fn batch_loss_and_gradients(model: &PredictorModel, batch: &Batch) -> Result<(f64, Gradients), NetError> {
    let targets = batch.targets.as_ref().ok_or(NetError::EmptyBatch)?;
    if batch.size() == 0 {
        return Err(NetError::EmptyBatch);
    }
    let layers = model.config.recurrent_layers;
    let mut traces: Vec<LayerTrace> = Vec::with_capacity(layers);
    for l in 0..layers {
        let (w_in, w_rec, bias) = model.layer(l);
        let trace = {
            let inputs = if l == 0 { &batch.steps } else { &traces[l - 1].hidden };
            run_layer(w_in, w_rec, bias, inputs, true)
        };
        traces.push(trace);
    }
    let top = traces[layers - 1].hidden.last().unwrap().clone();
    let head = run_head(model, top);
    if let Some(s) = first_nonfinite_sample(&head.output, targets) {
        return Err(NetError::NonFiniteLoss(s));
    }
    let mut grads = Gradients::zeros_like(model);
    let (loss, d_top) = head_backward(model, &head, targets, &mut grads);

    let k = batch.steps.len();
    let b = batch.size();
    let h = model.config.hidden_size;
    let mut d_hidden_ext: Vec<Option<DMatrix<f64>>> = vec![None; k];
    d_hidden_ext[k - 1] = Some(d_top);
    for l in (0..layers).rev() {
        let (w_in, w_rec, _) = model.layer(l);
        let tr = &traces[l];
        let inputs = if l == 0 { &batch.steps } else { &traces[l - 1].hidden };
        let mut d_h_next = DMatrix::<f64>::zeros(h, b);
        let mut d_c_next = DMatrix::<f64>::zeros(h, b);
        let mut d_inputs: Vec<Option<DMatrix<f64>>> = vec![None; k];
        let mut gw_in = DMatrix::<f64>::zeros(4 * h, w_in.ncols());
        let mut gw_rec = DMatrix::<f64>::zeros(4 * h, h);
        let mut gb = DMatrix::<f64>::zeros(4 * h, 1);
        for t in (0..k).rev() {
            let mut d_h = d_h_next;
            if let Some(ext) = &d_hidden_ext[t] {
                d_h += ext;
            }
            let gates = &tr.gates[t];
            let tc = &tr.tanh_cells[t];
            let mut d_g = DMatrix::<f64>::zeros(4 * h, b);
            let mut d_c_prev = DMatrix::<f64>::zeros(h, b);
            for s in 0..b {
                for j in 0..h {
                    let (ig, fg, cg, og) = (
                        gates[(j, s)],
                        gates[(h + j, s)],
                        gates[(2 * h + j, s)],
                        gates[(3 * h + j, s)],
                    );
                    let c_prev = if t > 0 { tr.cells[t - 1][(j, s)] } else { 0.0 };
                    let dh = d_h[(j, s)];
                    let tcv = tc[(j, s)];
                    let d_o = dh * tcv;
                    let d_c = dh * og * (1.0 - tcv * tcv) + d_c_next[(j, s)];
                    d_c_prev[(j, s)] = d_c * fg;
                    d_g[(j, s)] = d_c * cg * ig * (1.0 - ig);
                    d_g[(h + j, s)] = d_c * c_prev * fg * (1.0 - fg);
                    d_g[(2 * h + j, s)] = d_c * ig * (1.0 - cg * cg);
                    d_g[(3 * h + j, s)] = d_o * og * (1.0 - og);
                }
            }
            gw_in.gemm(1.0, &d_g, &inputs[t].transpose(), 1.0);
            if t > 0 {
                gw_rec.gemm(1.0, &d_g, &tr.hidden[t - 1].transpose(), 1.0);
            }
            gb += row_sums(&d_g);
            if l > 0 {
                d_inputs[t] = Some(w_in.tr_mul(&d_g));
            }
            d_h_next = w_rec.tr_mul(&d_g);
            d_c_next = d_c_prev;
        }
        grads.0[3 * l] = gw_in;
        grads.0[3 * l + 1] = gw_rec;
        grads.0[3 * l + 2] = gb;
        d_hidden_ext = d_inputs;
    }
    Ok((loss, grads))
}

/// Loss and gradients for raw `(window k × 4d, target N × d)` pairs.
pub fn loss_and_gradients(
    model: &PredictorModel,
    batch: &[(DMatrix<f64>, DMatrix<f64>)],
) -> Result<(f64, Gradients), NetError> {
    if batch.is_empty() {
        return Err(NetError::EmptyBatch);
    }
    let windows: Vec<&DMatrix<f64>> = batch.iter().map(|(w, _)| w).collect();
    let targets: Vec<&DMatrix<f64>> = batch.iter().map(|(_, t)| t).collect();
    let prepared = Batch::from_windows(model, &windows, Some(&targets))?;
    batch_loss_and_gradients(model, &prepared)
}

/// Head-only loss and gradients given precomputed top-layer features.
/// Recurrent-block gradients are left at zero.
pub(crate) fn head_loss_and_gradients(
    model: &PredictorModel,
    features: DMatrix<f64>,
    targets: &DMatrix<f64>,
) -> Result<(f64, Gradients), NetError> {
    let head = run_head(model, features);
    if let Some(s) = first_nonfinite_sample(&head.output, targets) {
        return Err(NetError::NonFiniteLoss(s));
    }
    let mut grads = Gradients::zeros_like(model);
    let (loss, _) = head_backward(model, &head, targets, &mut grads);
    Ok((loss, grads))
}

/// Loss only, on a prepared batch.
pub fn batch_loss(model: &PredictorModel, batch: &Batch) -> Result<f64, NetError> {
    let targets = batch.targets.as_ref().ok_or(NetError::EmptyBatch)?;
    let out = forward_normalized(model, batch);
    if let Some(s) = first_nonfinite_sample(&out, targets) {
        return Err(NetError::NonFiniteLoss(s));
    }
    Ok((out - targets).norm_squared() / (targets.nrows() * targets.ncols()) as f64)
}
