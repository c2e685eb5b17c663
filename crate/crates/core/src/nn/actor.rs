//! Recurrent actor: batched forward pass and exact reverse-mode gradients.

use serde::{Deserialize, Serialize};

use super::arch::{ActionKind, ActorArchitecture, LayerId};
use super::dist::{DistParams, LOG_STD_MAX, LOG_STD_MIN};
use crate::error::{Error, Result};
use crate::numerics::{axpy, orthogonal, Matrix, RngStream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActorParams {
    pub arch: ActorArchitecture,
    /// Indexed by [`LayerId::index`].
    pub weights: Vec<Matrix>,
    /// `1 × out` rows, indexed like `weights`. Never adapted.
    pub biases: Vec<Matrix>,
}

impl ActorParams {
    pub fn zeros(arch: ActorArchitecture) -> Self {
        let layers = arch.layers();
        Self {
            arch,
            weights: layers.iter().map(|l| Matrix::zeros(l.rows, l.cols)).collect(),
            biases: layers.iter().map(|l| Matrix::zeros(1, l.rows)).collect(),
        }
    }

    /// Orthogonal weights with per-layer gains, zero biases.
    pub fn init(arch: ActorArchitecture, rng: &mut RngStream) -> Self {
        let mut p = Self::zeros(arch);
        for spec in arch.layers() {
            p.weights[spec.id.index()] = orthogonal(spec.rows, spec.cols, spec.init_gain, rng);
        }
        p
    }

    pub fn weight(&self, id: LayerId) -> &Matrix {
        &self.weights[id.index()]
    }

    pub fn weight_mut(&mut self, id: LayerId) -> &mut Matrix {
        &mut self.weights[id.index()]
    }

    pub fn bias(&self, id: LayerId) -> &Matrix {
        &self.biases[id.index()]
    }

    pub fn view(&self) -> ActorView<'_> {
        ActorView { weights: self.weights.iter().collect(), biases: self.biases.iter().collect() }
    }

    /// View whose weights come from `effective` (one matrix per layer).
    pub fn view_with<'a>(&'a self, effective: &'a [Matrix]) -> Result<ActorView<'a>> {
        if effective.len() != self.weights.len() {
            return Err(Error::Shape(format!(
                "override has {} layers, architecture has {}",
                effective.len(),
                self.weights.len()
            )));
        }
        for (w, e) in self.weights.iter().zip(effective) {
            if w.shape() != e.shape() {
                return Err(Error::Shape(format!(
                    "override {:?} vs weight {:?}",
                    e.shape(),
                    w.shape()
                )));
            }
        }
        Ok(ActorView { weights: effective.iter().collect(), biases: self.biases.iter().collect() })
    }

    pub fn param_count(&self) -> usize {
        self.weights.iter().chain(&self.biases).map(Matrix::len).sum()
    }

    pub fn check_shapes(&self) -> Result<()> {
        let layers = self.arch.layers();
        if layers.len() != self.weights.len() || layers.len() != self.biases.len() {
            return Err(Error::Shape("layer count does not match architecture".into()));
        }
        for (spec, (w, b)) in layers.iter().zip(self.weights.iter().zip(&self.biases)) {
            if w.shape() != (spec.rows, spec.cols) || b.shape() != (1, spec.rows) {
                return Err(Error::Shape(format!("layer {} has wrong shape", spec.id)));
            }
        }
        Ok(())
    }
}

/// Borrowed weights and biases actually used by a forward pass.
#[derive(Debug, Clone)]
pub struct ActorView<'a> {
    pub weights: Vec<&'a Matrix>,
    pub biases: Vec<&'a Matrix>,
}

impl<'a> ActorView<'a> {
    #[inline]
    fn w(&self, id: LayerId) -> &Matrix {
        self.weights[id.index()]
    }
    #[inline]
    fn b(&self, id: LayerId) -> &Matrix {
        self.biases[id.index()]
    }
}

/// Time-major batch of observation sequences.
#[derive(Debug, Clone, PartialEq)]
pub struct SeqInput {
    /// `T` matrices of shape `B × input_dim`.
    pub obs: Vec<Matrix>,
    /// `episode_start[t][b]`: the hidden state is zeroed before step `t`.
    pub episode_start: Vec<Vec<bool>>,
}

impl SeqInput {
    pub fn new(obs: Vec<Matrix>) -> Self {
        let starts = obs.iter().map(|m| vec![false; m.rows()]).collect();
        Self { obs, episode_start: starts }
    }

    pub fn len(&self) -> usize {
        self.obs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.obs.is_empty()
    }

    pub fn batch(&self) -> usize {
        self.obs.first().map_or(0, Matrix::rows)
    }
}

/// Head outputs for one time step, one row per batch element.
#[derive(Debug, Clone, PartialEq)]
pub enum DistBatch {
    Discrete { logits: Matrix },
    Continuous { mean: Matrix, log_std: Matrix, log_std_raw: Matrix },
}

impl DistBatch {
    pub fn batch(&self) -> usize {
        match self {
            DistBatch::Discrete { logits } => logits.rows(),
            DistBatch::Continuous { mean, .. } => mean.rows(),
        }
    }

    pub fn row(&self, b: usize) -> DistParams {
        match self {
            DistBatch::Discrete { logits } => DistParams::Discrete { logits: logits.row(b).to_vec() },
            DistBatch::Continuous { mean, log_std, .. } => DistParams::Continuous {
                mean: mean.row(b).to_vec(),
                log_std: log_std.row(b).to_vec(),
            },
        }
    }
}

/// Upstream gradient on one step's head outputs.
#[derive(Debug, Clone, PartialEq)]
pub enum HeadGrad {
    Discrete { logits: Matrix },
    /// `log_std` is the gradient with respect to the clamped value.
    Continuous { mean: Matrix, log_std: Matrix },
}

impl HeadGrad {
    pub fn zeros(action: ActionKind, batch: usize) -> Self {
        let a = action.head_dim();
        match action {
            ActionKind::Discrete { .. } => HeadGrad::Discrete { logits: Matrix::zeros(batch, a) },
            ActionKind::Continuous { .. } => HeadGrad::Continuous {
                mean: Matrix::zeros(batch, a),
                log_std: Matrix::zeros(batch, a),
            },
        }
    }
}

#[derive(Debug, Clone)]
pub struct StepTrace {
    pub x: Matrix,
    pub fc1: Matrix,
    pub fc2: Matrix,
    /// Hidden state entering the GRU after episode-start masking.
    pub h_prev: Matrix,
    pub z: Matrix,
    pub r: Matrix,
    pub n: Matrix,
    /// `h_prev · W_hnᵀ + b_hn`, the reset-gated term.
    pub gh_n: Matrix,
    pub h: Matrix,
    pub post: Matrix,
    /// 1.0 where the episode did not restart before this step.
    pub carry: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct ActorTrace {
    pub steps: Vec<StepTrace>,
}

impl ActorTrace {
    /// Post-activation values of a hidden layer at step `t`.
    pub fn activations(&self, t: usize, layer: LayerId) -> Option<&Matrix> {
        let s = self.steps.get(t)?;
        match layer {
            LayerId::Fc1 => Some(&s.fc1),
            LayerId::Fc2 => Some(&s.fc2),
            LayerId::GruX | LayerId::GruH => Some(&s.h),
            LayerId::Post => Some(&s.post),
            _ => None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub dists: Vec<DistBatch>,
    pub h_final: Matrix,
    pub trace: ActorTrace,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActorGrads {
    /// Gradients with respect to the weights the forward pass actually used
    /// (the override slots when an override was supplied).
    pub weights: Vec<Matrix>,
    pub biases: Vec<Matrix>,
}

impl ActorGrads {
    pub fn zeros(arch: &ActorArchitecture) -> Self {
        let p = ActorParams::zeros(*arch);
        Self { weights: p.weights, biases: p.biases }
    }

    pub fn add_assign(&mut self, other: &ActorGrads) -> Result<()> {
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            a.add_assign(b)?;
        }
        for (a, b) in self.biases.iter_mut().zip(&other.biases) {
            a.add_assign(b)?;
        }
        Ok(())
    }

    pub fn sum_sq(&self) -> f64 {
        self.weights.iter().chain(&self.biases).map(Matrix::sum_sq).sum()
    }
}

fn dense(x: &Matrix, w: &Matrix, b: &Matrix) -> Matrix {
    let mut y = x.matmul_t(w).expect("dense shapes validated");
    let bias = b.as_slice();
    for r in 0..y.rows() {
        for (v, bb) in y.row_mut(r).iter_mut().zip(bias) {
            *v += bb;
        }
    }
    y
}

fn relu_in_place(m: &mut Matrix) {
    for v in m.as_mut_slice() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// `dW += dyᵀ·x`, `db += Σ_rows dy`, returns `dy·W`.
fn dense_backward(dy: &Matrix, x: &Matrix, w: &Matrix, dw: &mut Matrix, db: &mut Matrix) -> Matrix {
    for b in 0..dy.rows() {
        let xr = x.row(b);
        for (o, &g) in dy.row(b).iter().enumerate() {
            if g != 0.0 {
                axpy(g, xr, dw.row_mut(o));
            }
        }
        for (acc, &g) in db.as_mut_slice().iter_mut().zip(dy.row(b)) {
            *acc += g;
        }
    }
    dy.matmul(w).expect("dense shapes validated")
}

fn relu_backward(dy: &mut Matrix, post: &Matrix) {
    for (g, &a) in dy.as_mut_slice().iter_mut().zip(post.as_slice()) {
        if a <= 0.0 {
            *g = 0.0;
        }
    }
}

fn validate_input(arch: &ActorArchitecture, input: &SeqInput, h0: &Matrix) -> Result<()> {
    let b = h0.rows();
    if h0.cols() != arch.hidden_dim {
        return Err(Error::Shape(format!(
            "h0 width {} vs hidden dim {}",
            h0.cols(),
            arch.hidden_dim
        )));
    }
    if input.episode_start.len() != input.obs.len() {
        return Err(Error::Shape("episode_start length differs from obs length".into()));
    }
    for (t, (x, st)) in input.obs.iter().zip(&input.episode_start).enumerate() {
        if x.shape() != (b, arch.input_dim()) || st.len() != b {
            return Err(Error::Shape(format!(
                "step {t}: obs {:?}, expected ({b}, {})",
                x.shape(),
                arch.input_dim()
            )));
        }
        x.ensure_finite("observation")?;
    }
    Ok(())
}

/// Forward pass through a view (shared weights, an override, or merged weights).
pub fn forward_view(
    arch: &ActorArchitecture,
    view: &ActorView<'_>,
    input: &SeqInput,
    h0: &Matrix,
) -> Result<ForwardOutput> {
    validate_input(arch, input, h0)?;
    let hd = arch.hidden_dim;
    let batch = h0.rows();
    let mut h = h0.clone();
    let mut dists = Vec::with_capacity(input.len());
    let mut steps = Vec::with_capacity(input.len());
    for (x, starts) in input.obs.iter().zip(&input.episode_start) {
        let carry: Vec<f64> = starts.iter().map(|&s| if s { 0.0 } else { 1.0 }).collect();
        for (b, &c) in carry.iter().enumerate() {
            if c == 0.0 {
                h.row_mut(b).fill(0.0);
            }
        }
        let mut fc1 = dense(x, view.w(LayerId::Fc1), view.b(LayerId::Fc1));
        relu_in_place(&mut fc1);
        let mut fc2 = dense(&fc1, view.w(LayerId::Fc2), view.b(LayerId::Fc2));
        relu_in_place(&mut fc2);

        let gx = dense(&fc2, view.w(LayerId::GruX), view.b(LayerId::GruX));
        let gh = dense(&h, view.w(LayerId::GruH), view.b(LayerId::GruH));
        let mut z = Matrix::zeros(batch, hd);
        let mut r = Matrix::zeros(batch, hd);
        let mut n = Matrix::zeros(batch, hd);
        let mut gh_n = Matrix::zeros(batch, hd);
        let mut h_new = Matrix::zeros(batch, hd);
        for b in 0..batch {
            let (gxr, ghr, hp) = (gx.row(b), gh.row(b), h.row(b));
            for j in 0..hd {
                let zj = sigmoid(gxr[j] + ghr[j]);
                let rj = sigmoid(gxr[hd + j] + ghr[hd + j]);
                let ghn = ghr[2 * hd + j];
                let nj = (gxr[2 * hd + j] + rj * ghn).tanh();
                z.set(b, j, zj);
                r.set(b, j, rj);
                n.set(b, j, nj);
                gh_n.set(b, j, ghn);
                h_new.set(b, j, (1.0 - zj) * nj + zj * hp[j]);
            }
        }
        let mut post = dense(&h_new, view.w(LayerId::Post), view.b(LayerId::Post));
        relu_in_place(&mut post);

        let head = dense(&post, view.w(LayerId::Head), view.b(LayerId::Head));
        let dist = match arch.action {
            ActionKind::Discrete { .. } => DistBatch::Discrete { logits: head },
            ActionKind::Continuous { .. } => {
                let raw = dense(&post, view.w(LayerId::LogStd), view.b(LayerId::LogStd));
                let mut clamped = raw.clone();
                for v in clamped.as_mut_slice() {
                    *v = v.clamp(LOG_STD_MIN, LOG_STD_MAX);
                }
                DistBatch::Continuous { mean: head, log_std: clamped, log_std_raw: raw }
            }
        };
        dists.push(dist);
        steps.push(StepTrace {
            x: x.clone(),
            fc1,
            fc2,
            h_prev: h,
            z,
            r,
            n,
            gh_n,
            h: h_new.clone(),
            post,
            carry,
        });
        h = h_new;
    }
    for d in &dists {
        let ok = match d {
            DistBatch::Discrete { logits } => logits.is_finite(),
            DistBatch::Continuous { mean, log_std, .. } => mean.is_finite() && log_std.is_finite(),
        };
        if !ok {
            return Err(Error::NonFinite("actor output".into()));
        }
    }
    Ok(ForwardOutput { dists, h_final: h, trace: ActorTrace { steps } })
}

/// Full BPTT over the traced sequence; no gradient flows into `h0`.
pub fn backward_view(
    arch: &ActorArchitecture,
    view: &ActorView<'_>,
    out: &ForwardOutput,
    upstream: &[HeadGrad],
) -> Result<ActorGrads> {
    let steps = &out.trace.steps;
    if upstream.len() != steps.len() || out.dists.len() != steps.len() {
        return Err(Error::Shape(format!(
            "trace has {} steps, upstream has {}",
            steps.len(),
            upstream.len()
        )));
    }
    let hd = arch.hidden_dim;
    let mut g = ActorGrads::zeros(arch);
    let batch = steps.first().map_or(0, |s| s.h.rows());
    let mut dh_next = Matrix::zeros(batch, hd);

    for t in (0..steps.len()).rev() {
        let s = &steps[t];
        // Head(s) → post.
        let mut dpost = match (&upstream[t], &out.dists[t]) {
            (HeadGrad::Discrete { logits }, DistBatch::Discrete { .. }) => {
                check_rows(logits, batch, arch.action.head_dim())?;
                let (dw, db) = split_grad(&mut g, LayerId::Head);
                dense_backward(logits, &s.post, view.w(LayerId::Head), dw, db)
            }
            (HeadGrad::Continuous { mean, log_std }, DistBatch::Continuous { log_std_raw, .. }) => {
                check_rows(mean, batch, arch.action.head_dim())?;
                check_rows(log_std, batch, arch.action.head_dim())?;
                let mut dls = log_std.clone();
                for (d, &raw) in dls.as_mut_slice().iter_mut().zip(log_std_raw.as_slice()) {
                    if !(LOG_STD_MIN..=LOG_STD_MAX).contains(&raw) {
                        *d = 0.0;
                    }
                }
                let (dw, db) = split_grad(&mut g, LayerId::Head);
                let mut dp = dense_backward(mean, &s.post, view.w(LayerId::Head), dw, db);
                let (dw, db) = split_grad(&mut g, LayerId::LogStd);
                let dp2 = dense_backward(&dls, &s.post, view.w(LayerId::LogStd), dw, db);
                dp.add_assign(&dp2)?;
                dp
            }
            _ => return Err(Error::InvalidArgument("upstream kind does not match head".into())),
        };
        relu_backward(&mut dpost, &s.post);
        let (dw, db) = split_grad(&mut g, LayerId::Post);
        let mut dh = dense_backward(&dpost, &s.h, view.w(LayerId::Post), dw, db);
        dh.add_assign(&dh_next)?;

        // GRU cell.
        let mut dgx = Matrix::zeros(batch, 3 * hd);
        let mut dgh = Matrix::zeros(batch, 3 * hd);
        let mut dh_prev = Matrix::zeros(batch, hd);
        for b in 0..batch {
            for j in 0..hd {
                let dhj = dh.get(b, j);
                let (zj, rj, nj) = (s.z.get(b, j), s.r.get(b, j), s.n.get(b, j));
                let hp = s.h_prev.get(b, j);
                let dn = dhj * (1.0 - zj);
                let dz = dhj * (hp - nj);
                let dn_pre = dn * (1.0 - nj * nj);
                let dr = dn_pre * s.gh_n.get(b, j);
                let dz_pre = dz * zj * (1.0 - zj);
                let dr_pre = dr * rj * (1.0 - rj);
                dgx.set(b, j, dz_pre);
                dgx.set(b, hd + j, dr_pre);
                dgx.set(b, 2 * hd + j, dn_pre);
                dgh.set(b, j, dz_pre);
                dgh.set(b, hd + j, dr_pre);
                dgh.set(b, 2 * hd + j, dn_pre * rj);
                dh_prev.set(b, j, dhj * zj);
            }
        }
        let (dw, db) = split_grad(&mut g, LayerId::GruH);
        let dh_from_proj = dense_backward(&dgh, &s.h_prev, view.w(LayerId::GruH), dw, db);
        dh_prev.add_assign(&dh_from_proj)?;
        for (b, &c) in s.carry.iter().enumerate() {
            if c == 0.0 {
                dh_prev.row_mut(b).fill(0.0);
            }
        }
        dh_next = dh_prev;

        let (dw, db) = split_grad(&mut g, LayerId::GruX);
        let mut dfc2 = dense_backward(&dgx, &s.fc2, view.w(LayerId::GruX), dw, db);
        relu_backward(&mut dfc2, &s.fc2);
        let (dw, db) = split_grad(&mut g, LayerId::Fc2);
        let mut dfc1 = dense_backward(&dfc2, &s.fc1, view.w(LayerId::Fc2), dw, db);
        relu_backward(&mut dfc1, &s.fc1);
        let (dw, db) = split_grad(&mut g, LayerId::Fc1);
        let _ = dense_backward(&dfc1, &s.x, view.w(LayerId::Fc1), dw, db);
    }
    Ok(g)
}

fn split_grad(g: &mut ActorGrads, id: LayerId) -> (&mut Matrix, &mut Matrix) {
    (&mut g.weights[id.index()], &mut g.biases[id.index()])
}

fn check_rows(m: &Matrix, rows: usize, cols: usize) -> Result<()> {
    if m.shape() != (rows, cols) {
        return Err(Error::Shape(format!("upstream {:?}, expected ({rows}, {cols})", m.shape())));
    }
    Ok(())
}

/// Forward pass with an optional full set of effective weights.
pub fn actor_forward(
    params: &ActorParams,
    effective: Option<&[Matrix]>,
    input: &SeqInput,
    h0: &Matrix,
) -> Result<ForwardOutput> {
    let view = match effective {
        Some(e) => params.view_with(e)?,
        None => params.view(),
    };
    forward_view(&params.arch, &view, input, h0)
}

/// Gradients for the pass produced by [`actor_forward`] with the same arguments.
pub fn actor_backward(
    params: &ActorParams,
    effective: Option<&[Matrix]>,
    out: &ForwardOutput,
    upstream: &[HeadGrad],
) -> Result<ActorGrads> {
    let view = match effective {
        Some(e) => params.view_with(e)?,
        None => params.view(),
    };
    backward_view(&params.arch, &view, out, upstream)
}
