//! Two-headed tanh MLP `(P_x, P_y) -> (u_x, u_y, V)` with hand-written
//! reverse-mode gradients.
//!
//! Topology is fixed: three shared tanh layers of width 128, a tanh control
//! head of width 2 and a linear value head of width 1. Raw positions are
//! mapped affinely onto `[-1, 1]²` before the first layer.
//!
//! The PDE residual contains `∂V/∂P`, so its parameter gradient needs second
//! derivatives. The forward pass therefore carries two tangent streams
//! (one per input direction) next to the activations; `∂V/∂z_k` is read off
//! the value head applied to tangent `k`. The backward pass then runs
//! reverse mode through activations and tangents together.

use std::io::{Read, Write};

use ndarray::{Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::{Bounds, Control, Position};

pub const INPUT_DIM: usize = 2;
pub const HIDDEN_DIM: usize = 128;
pub const HIDDEN_LAYERS: usize = 3;
pub const CONTROL_DIM: usize = 2;
pub const VALUE_DIM: usize = 1;

/// Layer widths in checkpoint order: input, hidden × 3, control, value.
pub const TOPOLOGY: [u32; 6] = [
    INPUT_DIM as u32,
    HIDDEN_DIM as u32,
    HIDDEN_DIM as u32,
    HIDDEN_DIM as u32,
    CONTROL_DIM as u32,
    VALUE_DIM as u32,
];

const CHECKPOINT_MAGIC: &[u8; 5] = b"NHJR1";

/// Affine weights `out × in` and bias `out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

impl Dense {
    fn zeros(out: usize, inp: usize) -> Self {
        Self {
            w: Array2::zeros((out, inp)),
            b: Array1::zeros(out),
        }
    }
}

/// All trainable parameters. Also used as the container for gradients and
/// Adam moments, which share the parameter shapes.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParameters {
    pub trunk: [Dense; HIDDEN_LAYERS],
    pub control: Dense,
    pub value: Dense,
}

impl MlpParameters {
    pub fn zeros() -> Self {
        Self {
            trunk: [
                Dense::zeros(HIDDEN_DIM, INPUT_DIM),
                Dense::zeros(HIDDEN_DIM, HIDDEN_DIM),
                Dense::zeros(HIDDEN_DIM, HIDDEN_DIM),
            ],
            control: Dense::zeros(CONTROL_DIM, HIDDEN_DIM),
            value: Dense::zeros(VALUE_DIM, HIDDEN_DIM),
        }
    }

    /// Parameter tensors in checkpoint order (each layer's weights, row
    /// major, then its bias).
    pub fn tensors(&self) -> [&[f64]; 10] {
        fn s(a: &Array2<f64>) -> &[f64] {
            a.as_slice().expect("standard layout")
        }
        fn v(a: &Array1<f64>) -> &[f64] {
            a.as_slice().expect("standard layout")
        }
        [
            s(&self.trunk[0].w),
            v(&self.trunk[0].b),
            s(&self.trunk[1].w),
            v(&self.trunk[1].b),
            s(&self.trunk[2].w),
            v(&self.trunk[2].b),
            s(&self.control.w),
            v(&self.control.b),
            s(&self.value.w),
            v(&self.value.b),
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut [f64]; 10] {
        let [t0, t1, t2] = &mut self.trunk;
        [
            t0.w.as_slice_mut().expect("standard layout"),
            t0.b.as_slice_mut().expect("standard layout"),
            t1.w.as_slice_mut().expect("standard layout"),
            t1.b.as_slice_mut().expect("standard layout"),
            t2.w.as_slice_mut().expect("standard layout"),
            t2.b.as_slice_mut().expect("standard layout"),
            self.control.w.as_slice_mut().expect("standard layout"),
            self.control.b.as_slice_mut().expect("standard layout"),
            self.value.w.as_slice_mut().expect("standard layout"),
            self.value.b.as_slice_mut().expect("standard layout"),
        ]
    }

    /// Total number of scalars.
    pub fn len(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Scalar at flat index `idx` (checkpoint order).
    pub fn get(&self, mut idx: usize) -> f64 {
        for t in self.tensors() {
            if idx < t.len() {
                return t[idx];
            }
            idx -= t.len();
        }
        panic!("parameter index out of range")
    }

    pub fn set(&mut self, mut idx: usize, value: f64) {
        for t in self.tensors_mut() {
            if idx < t.len() {
                t[idx] = value;
                return;
            }
            idx -= t.len();
        }
        panic!("parameter index out of range")
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    pub fn scaled(&self, k: f64) -> Self {
        let mut out = self.clone();
        for t in out.tensors_mut() {
            t.iter_mut().for_each(|v| *v *= k);
        }
        out
    }

    pub fn add_assign(&mut self, other: &Self) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
    }
}

/// Glorot-uniform weights, zero biases. Deterministic per seed.
pub fn init_params(seed: u64) -> MlpParameters {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = MlpParameters::zeros();
    let mut fill = |d: &mut Dense| {
        let (out, inp) = d.w.dim();
        let bound = (6.0 / (inp + out) as f64).sqrt();
        d.w.iter_mut().for_each(|w| *w = rng.gen_range(-bound..=bound));
    };
    for d in p.trunk.iter_mut() {
        fill(d);
    }
    fill(&mut p.control);
    fill(&mut p.value);
    p
}

/// Affine map from workspace coordinates onto `[-1, 1]²`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InputScaling {
    center: (f64, f64),
    inv_half: (f64, f64),
}

impl InputScaling {
    pub fn from_bounds(b: Bounds) -> Self {
        Self {
            center: (0.5 * (b.x_min + b.x_max), 0.5 * (b.y_min + b.y_max)),
            inv_half: (2.0 / b.width(), 2.0 / b.height()),
        }
    }

    /// Identity map (normalized == raw).
    pub fn identity() -> Self {
        Self {
            center: (0.0, 0.0),
            inv_half: (1.0, 1.0),
        }
    }

    pub fn normalize(&self, p: Position) -> (f64, f64) {
        (
            (p.px - self.center.0) * self.inv_half.0,
            (p.py - self.center.1) * self.inv_half.1,
        )
    }

    /// `dz/dP` per axis.
    pub fn factor(&self) -> (f64, f64) {
        self.inv_half
    }
}

/// Activations of one batched forward pass.
///
/// `hidden[l]` holds post-tanh activations of trunk layer `l`; the tangent
/// arrays hold, for input direction `k`, pre-activation and activation
/// derivatives with respect to the normalized input `z_k`.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub z: Array2<f64>,
    pub hidden: Vec<Array2<f64>>,
    pub control: Array2<f64>,
    pub value: Array1<f64>,
    pub pre_tangent: Option<[Vec<Array2<f64>>; 2]>,
    pub tangent: Option<[Vec<Array2<f64>>; 2]>,
    /// `∂V/∂z` per point (normalized units), present with tangents.
    pub value_grad_z: Option<Array2<f64>>,
}

impl ForwardTrace {
    pub fn batch_size(&self) -> usize {
        self.z.nrows()
    }
}

fn check_points(points: &[Position]) -> Result<()> {
    if let Some(p) = points.iter().find(|p| !p.is_finite()) {
        return Err(Error::NonFinite(format!("network input ({}, {})", p.px, p.py)));
    }
    Ok(())
}

fn tanh_deriv(h: &Array2<f64>) -> Array2<f64> {
    h.mapv(|x| 1.0 - x * x)
}

/// Batched forward pass. With `with_tangents`, also propagates the input
/// tangents needed for `∂V/∂P`.
pub fn forward_batch(
    params: &MlpParameters,
    scaling: &InputScaling,
    points: &[Position],
    with_tangents: bool,
) -> Result<ForwardTrace> {
    check_points(points)?;
    let n = points.len();
    let mut z = Array2::zeros((n, INPUT_DIM));
    for (i, p) in points.iter().enumerate() {
        let (zx, zy) = scaling.normalize(*p);
        z[[i, 0]] = zx;
        z[[i, 1]] = zy;
    }
    let mut hidden = Vec::with_capacity(HIDDEN_LAYERS);
    let mut pre_t: [Vec<Array2<f64>>; 2] = [Vec::new(), Vec::new()];
    let mut tan: [Vec<Array2<f64>>; 2] = [Vec::new(), Vec::new()];
    let mut x = z.clone();
    for (l, layer) in params.trunk.iter().enumerate() {
        let mut a = x.dot(&layer.w.t());
        a += &layer.b;
        let h = a.mapv(f64::tanh);
        if with_tangents {
            let d = tanh_deriv(&h);
            for k in 0..INPUT_DIM {
                let at = if l == 0 {
                    let col = layer.w.column(k).to_owned();
                    col.broadcast((n, HIDDEN_DIM)).expect("broadcast").to_owned()
                } else {
                    tan[k][l - 1].dot(&layer.w.t())
                };
                tan[k].push(&at * &d);
                pre_t[k].push(at);
            }
        }
        hidden.push(h.clone());
        x = h;
    }
    let h3 = &hidden[HIDDEN_LAYERS - 1];
    let mut ac = h3.dot(&params.control.w.t());
    ac += &params.control.b;
    let control = ac.mapv(f64::tanh);
    let wv = params.value.w.row(0);
    let value = h3.dot(&wv) + params.value.b[0];
    let (pre_tangent, tangent, value_grad_z) = if with_tangents {
        let mut g = Array2::zeros((n, INPUT_DIM));
        for (k, t) in tan.iter().enumerate() {
            g.column_mut(k).assign(&t[HIDDEN_LAYERS - 1].dot(&wv));
        }
        (Some(pre_t), Some(tan), Some(g))
    } else {
        (None, None, None)
    };
    Ok(ForwardTrace {
        z,
        hidden,
        control,
        value,
        pre_tangent,
        tangent,
        value_grad_z,
    })
}

/// Single-point forward pass.
pub fn forward(
    params: &MlpParameters,
    scaling: &InputScaling,
    p: Position,
) -> Result<(Control, f64, ForwardTrace)> {
    let trace = forward_batch(params, scaling, &[p], false)?;
    let u = Control::new(trace.control[[0, 0]], trace.control[[0, 1]]);
    let v = trace.value[0];
    Ok((u, v, trace))
}

/// Control head output only; avoids the trace bookkeeping on the hot path.
pub fn control_at(params: &MlpParameters, scaling: &InputScaling, p: Position) -> Result<Control> {
    check_points(&[p])?;
    let (zx, zy) = scaling.normalize(p);
    let mut x: Vec<f64> = vec![zx, zy];
    for layer in &params.trunk {
        let mut next = Vec::with_capacity(HIDDEN_DIM);
        for (row, b) in layer.w.rows().into_iter().zip(layer.b.iter()) {
            let s: f64 = row.iter().zip(&x).map(|(w, xi)| w * xi).sum::<f64>() + b;
            next.push(s.tanh());
        }
        x = next;
    }
    let mut u = [0.0; CONTROL_DIM];
    for (k, (row, b)) in params.control.w.rows().into_iter().zip(params.control.b.iter()).enumerate() {
        u[k] = (row.iter().zip(&x).map(|(w, xi)| w * xi).sum::<f64>() + b).tanh();
    }
    Ok(Control::new(u[0], u[1]))
}

/// `∂V/∂P` at `p` in value units per meter.
pub fn input_gradient(params: &MlpParameters, scaling: &InputScaling, p: Position) -> Result<(f64, f64)> {
    let g = input_gradient_batch(params, scaling, &[p])?;
    Ok(g[0])
}

pub fn input_gradient_batch(
    params: &MlpParameters,
    scaling: &InputScaling,
    points: &[Position],
) -> Result<Vec<(f64, f64)>> {
    let trace = forward_batch(params, scaling, points, true)?;
    let g = trace.value_grad_z.expect("tangents requested");
    let (sx, sy) = scaling.factor();
    Ok(g.rows().into_iter().map(|r| (r[0] * sx, r[1] * sy)).collect())
}

/// Inner term of the PDE residual.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ResidualMode {
    /// `∂V/∂P_x·u_x + ∂V/∂P_y·u_y` with the network's own control.
    PredictedControl,
    /// `-(|∂V/∂P_x| + |∂V/∂P_y|)`, the closed-form box minimum.
    AnalyticHamiltonian,
}

/// Weights of the four loss terms.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossWeights {
    pub pde: f64,
    pub value: f64,
    pub obstacle: f64,
    pub goal: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            pde: 1.0,
            value: 1.0,
            obstacle: 1.0,
            goal: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossSpec {
    pub weights: LossWeights,
    pub residual_mode: ResidualMode,
}

impl Default for LossSpec {
    fn default() -> Self {
        Self {
            weights: LossWeights::default(),
            residual_mode: ResidualMode::PredictedControl,
        }
    }
}

/// Per-point data the loss needs besides the network outputs.
#[derive(Debug, Clone, Copy)]
pub struct LossBatch<'a> {
    pub points: &'a [Position],
    /// `V_true` per point.
    pub targets: &'a [f64],
    /// Unit vector toward the goal per point.
    pub goal_dirs: &'a [(f64, f64)],
    /// `max(0, R_d - d)²` per point; independent of the parameters.
    pub obstacle_penalty: &'a [f64],
}

impl LossBatch<'_> {
    fn validate(&self) -> Result<()> {
        let n = self.points.len();
        if n == 0 {
            return Err(Error::InvalidArgument("empty loss batch".into()));
        }
        if self.targets.len() != n || self.goal_dirs.len() != n || self.obstacle_penalty.len() != n {
            return Err(Error::ShapeMismatch(format!(
                "loss batch lengths: points {n}, targets {}, goal_dirs {}, penalties {}",
                self.targets.len(),
                self.goal_dirs.len(),
                self.obstacle_penalty.len()
            )));
        }
        Ok(())
    }
}

/// Unweighted loss components and their weighted total.
#[derive(Debug, Clone, Copy, PartialEq, Default, serde::Serialize)]
pub struct LossBreakdown {
    pub pde: f64,
    pub value: f64,
    pub obstacle: f64,
    pub goal: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn from_components(pde: f64, value: f64, obstacle: f64, goal: f64, w: &LossWeights) -> Self {
        Self {
            pde,
            value,
            obstacle,
            goal,
            total: w.pde * pde + w.value * value + w.obstacle * obstacle + w.goal * goal,
        }
    }
}

/// Per-point pieces of the loss evaluated from a trace.
struct PointTerms {
    /// Physical-unit value gradient per point.
    grad: Vec<(f64, f64)>,
    residual: Vec<f64>,
}

fn point_terms(trace: &ForwardTrace, scaling: &InputScaling, mode: ResidualMode) -> PointTerms {
    let g = trace.value_grad_z.as_ref().expect("tangents requested");
    let (sx, sy) = scaling.factor();
    let n = trace.batch_size();
    let mut grad = Vec::with_capacity(n);
    let mut residual = Vec::with_capacity(n);
    for i in 0..n {
        let gx = g[[i, 0]] * sx;
        let gy = g[[i, 1]] * sy;
        grad.push((gx, gy));
        residual.push(match mode {
            ResidualMode::PredictedControl => gx * trace.control[[i, 0]] + gy * trace.control[[i, 1]],
            ResidualMode::AnalyticHamiltonian => -(gx.abs() + gy.abs()),
        });
    }
    PointTerms { grad, residual }
}

fn breakdown(trace: &ForwardTrace, terms: &PointTerms, batch: &LossBatch, spec: &LossSpec) -> LossBreakdown {
    let n = batch.points.len() as f64;
    let mut pde = 0.0;
    let mut value = 0.0;
    let mut obstacle = 0.0;
    let mut goal = 0.0;
    for i in 0..batch.points.len() {
        pde += terms.residual[i] * terms.residual[i];
        let e = trace.value[i] - batch.targets[i];
        value += e * e;
        obstacle += batch.obstacle_penalty[i];
        let (rx, ry) = batch.goal_dirs[i];
        goal += trace.control[[i, 0]] * rx + trace.control[[i, 1]] * ry;
    }
    LossBreakdown::from_components(pde / n, value / n, obstacle / n, -goal / n, &spec.weights)
}

/// Loss components without gradients.
pub fn evaluate_loss(
    params: &MlpParameters,
    scaling: &InputScaling,
    batch: &LossBatch,
    spec: &LossSpec,
) -> Result<LossBreakdown> {
    batch.validate()?;
    let trace = forward_batch(params, scaling, batch.points, true)?;
    let terms = point_terms(&trace, scaling, spec.residual_mode);
    Ok(breakdown(&trace, &terms, batch, spec))
}

/// `∂L_total/∂θ` and the loss breakdown on one batch.
///
/// The PDE term is differentiated through the input-gradient computation:
/// its adjoint enters the tangent streams and flows back through the trunk
/// together with the ordinary activation adjoints.
pub fn loss_param_gradients(
    params: &MlpParameters,
    scaling: &InputScaling,
    batch: &LossBatch,
    spec: &LossSpec,
) -> Result<(MlpParameters, LossBreakdown)> {
    batch.validate()?;
    let trace = forward_batch(params, scaling, batch.points, true)?;
    let terms = point_terms(&trace, scaling, spec.residual_mode);
    let loss = breakdown(&trace, &terms, batch, spec);
    let grads = backward(params, scaling, &trace, &terms, batch, spec);
    if !grads.all_finite() || !loss.total.is_finite() {
        return Err(Error::NonFinite("loss gradient".into()));
    }
    Ok((grads, loss))
}

fn backward(
    params: &MlpParameters,
    scaling: &InputScaling,
    trace: &ForwardTrace,
    terms: &PointTerms,
    batch: &LossBatch,
    spec: &LossSpec,
) -> MlpParameters {
    let n = trace.batch_size();
    let inv_n = 1.0 / n as f64;
    let w = spec.weights;
    let (sx, sy) = scaling.factor();

    // Adjoints of the head outputs.
    let mut u_bar = Array2::<f64>::zeros((n, CONTROL_DIM));
    let mut v_bar = Array1::<f64>::zeros(n);
    let mut gz_bar = Array2::<f64>::zeros((n, INPUT_DIM));
    for i in 0..n {
        let (gx, gy) = terms.grad[i];
        let r = terms.residual[i];
        let dr = 2.0 * r * inv_n * w.pde;
        match spec.residual_mode {
            ResidualMode::PredictedControl => {
                u_bar[[i, 0]] += dr * gx;
                u_bar[[i, 1]] += dr * gy;
                gz_bar[[i, 0]] = dr * trace.control[[i, 0]] * sx;
                gz_bar[[i, 1]] = dr * trace.control[[i, 1]] * sy;
            }
            ResidualMode::AnalyticHamiltonian => {
                // r = -(|gx| + |gy|)
                gz_bar[[i, 0]] = -dr * sign(gx) * sx;
                gz_bar[[i, 1]] = -dr * sign(gy) * sy;
            }
        }
        v_bar[i] = 2.0 * (trace.value[i] - batch.targets[i]) * inv_n * w.value;
        let (rx, ry) = batch.goal_dirs[i];
        u_bar[[i, 0]] -= w.goal * rx * inv_n;
        u_bar[[i, 1]] -= w.goal * ry * inv_n;
    }
    let with_tangent_adjoint = w.pde != 0.0;

    let mut grads = MlpParameters::zeros();
    let h3 = &trace.hidden[HIDDEN_LAYERS - 1];
    let wv = params.value.w.row(0).to_owned();

    // Value head.
    let mut gwv = h3.t().dot(&v_bar);
    let tangent = trace.tangent.as_ref().expect("tangents requested");
    let pre_tangent = trace.pre_tangent.as_ref().expect("tangents requested");
    if with_tangent_adjoint {
        for (k, t) in tangent.iter().enumerate() {
            gwv += &t[HIDDEN_LAYERS - 1].t().dot(&gz_bar.column(k));
        }
    }
    grads.value.w.row_mut(0).assign(&gwv);
    grads.value.b[0] = v_bar.sum();

    // Control head.
    let ac_bar = &u_bar * &trace.control.mapv(|u| 1.0 - u * u);
    grads.control.w = ac_bar.t().dot(h3);
    grads.control.b = ac_bar.sum_axis(Axis(0));

    let mut h_bar = v_bar.clone().insert_axis(Axis(1)).dot(&wv.clone().insert_axis(Axis(0)));
    h_bar += &ac_bar.dot(&params.control.w);
    let mut t_bar: Vec<Array2<f64>> = if with_tangent_adjoint {
        (0..INPUT_DIM)
            .map(|k| {
                gz_bar
                    .column(k)
                    .to_owned()
                    .insert_axis(Axis(1))
                    .dot(&wv.clone().insert_axis(Axis(0)))
            })
            .collect()
    } else {
        Vec::new()
    };

    for l in (0..HIDDEN_LAYERS).rev() {
        let h = &trace.hidden[l];
        let d = tanh_deriv(h);
        let h_prev = if l == 0 { &trace.z } else { &trace.hidden[l - 1] };
        let mut at_bar: Vec<Array2<f64>> = Vec::with_capacity(INPUT_DIM);
        if with_tangent_adjoint {
            for k in 0..INPUT_DIM {
                at_bar.push(&t_bar[k] * &d);
                // Ḣ = (1 - H²) ⊙ Ȧ  ⇒  ∂Ḣ/∂H = -2 H ⊙ Ȧ
                let contrib = &t_bar[k] * &pre_tangent[k][l] * h;
                h_bar.scaled_add(-2.0, &contrib);
            }
        }
        let a_bar = &h_bar * &d;
        let layer = &params.trunk[l];
        let mut gw = a_bar.t().dot(h_prev);
        if with_tangent_adjoint {
            for k in 0..INPUT_DIM {
                if l == 0 {
                    // tangent input is the unit vector e_k for every point
                    let s = at_bar[k].sum_axis(Axis(0));
                    let mut col = gw.column_mut(k);
                    col += &s;
                } else {
                    gw += &at_bar[k].t().dot(&tangent[k][l - 1]);
                }
            }
        }
        grads.trunk[l].w = gw;
        grads.trunk[l].b = a_bar.sum_axis(Axis(0));
        if l > 0 {
            h_bar = a_bar.dot(&layer.w);
            if with_tangent_adjoint {
                t_bar = at_bar.iter().map(|ab| ab.dot(&layer.w)).collect();
            }
        }
    }
    grads
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Adam moments and hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: MlpParameters,
    pub v: MlpParameters,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamState {
    fn default() -> Self {
        Self {
            m: MlpParameters::zeros(),
            v: MlpParameters::zeros(),
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamState {
    /// In-place Adam step with bias correction.
    pub fn apply(&mut self, params: &mut MlpParameters, grads: &MlpParameters, lr: f64) -> Result<()> {
        if !(lr >= 0.0 && lr.is_finite()) {
            return Err(Error::InvalidArgument(format!("learning rate {lr} must be >= 0")));
        }
        self.step += 1;
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        let p_t = params.tensors_mut();
        let m_t = self.m.tensors_mut();
        let v_t = self.v.tensors_mut();
        for (((p, m), v), g) in p_t.into_iter().zip(m_t).zip(v_t).zip(grads.tensors()) {
            if p.len() != g.len() {
                return Err(Error::ShapeMismatch("gradient tensor length".into()));
            }
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Functional Adam update.
pub fn adam_update(
    params: &MlpParameters,
    grads: &MlpParameters,
    state: &AdamState,
    lr: f64,
) -> Result<(MlpParameters, AdamState)> {
    let mut p = params.clone();
    let mut s = state.clone();
    s.apply(&mut p, grads, lr)?;
    Ok((p, s))
}

/// Network parameters plus optimizer state, as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: MlpParameters,
    pub adam: AdamState,
}

impl Checkpoint {
    /// Layout (all little-endian):
    /// `"NHJR1"`, `u32` layer count, `u32` per layer width,
    /// parameters as `f64` in [`MlpParameters::tensors`] order,
    /// Adam first moments, second moments (same order),
    /// `beta1`, `beta2`, `eps` as `f64`, step counter as `u64`.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&(TOPOLOGY.len() as u32).to_le_bytes())?;
        for s in TOPOLOGY {
            w.write_all(&s.to_le_bytes())?;
        }
        for set in [&self.params, &self.adam.m, &self.adam.v] {
            for t in set.tensors() {
                for v in t {
                    w.write_all(&v.to_le_bytes())?;
                }
            }
        }
        for v in [self.adam.beta1, self.adam.beta2, self.adam.eps] {
            w.write_all(&v.to_le_bytes())?;
        }
        w.write_all(&self.adam.step.to_le_bytes())?;
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        let mut magic = [0u8; 5];
        r.read_exact(&mut magic).map_err(|_| bad("truncated header"))?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(bad("bad magic"));
        }
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b4).map_err(|_| bad("truncated header"))?;
        let count = u32::from_le_bytes(b4) as usize;
        if count > 64 {
            return Err(bad("implausible layer count"));
        }
        let mut sizes = Vec::with_capacity(count);
        for _ in 0..count {
            r.read_exact(&mut b4).map_err(|_| bad("truncated header"))?;
            sizes.push(u32::from_le_bytes(b4));
        }
        if sizes != TOPOLOGY {
            return Err(Error::Checkpoint(format!(
                "topology mismatch: file has {sizes:?}, expected {TOPOLOGY:?}"
            )));
        }
        let mut b8 = [0u8; 8];
        let mut read_set = |r: &mut R| -> Result<MlpParameters> {
            let mut p = MlpParameters::zeros();
            for t in p.tensors_mut() {
                for v in t.iter_mut() {
                    r.read_exact(&mut b8).map_err(|_| bad("truncated body"))?;
                    *v = f64::from_le_bytes(b8);
                }
            }
            Ok(p)
        };
        let params = read_set(&mut r)?;
        let m = read_set(&mut r)?;
        let v = read_set(&mut r)?;
        let mut scalars = [0.0; 3];
        for s in scalars.iter_mut() {
            r.read_exact(&mut b8).map_err(|_| bad("truncated body"))?;
            *s = f64::from_le_bytes(b8);
        }
        r.read_exact(&mut b8).map_err(|_| bad("truncated body"))?;
        let step = u64::from_le_bytes(b8);
        let mut rest = [0u8; 1];
        if r.read(&mut rest)? != 0 {
            return Err(bad("trailing bytes"));
        }
        Ok(Self {
            params,
            adam: AdamState {
                m,
                v,
                step,
                beta1: scalars[0],
                beta2: scalars[1],
                eps: scalars[2],
            },
        })
    }
}
