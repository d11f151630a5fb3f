//! Small dense neural core: tensors, a linear head, losses, Adam, finite
//! difference checking and a text checkpoint format.
//!
//! Everything is `f64`. Gradients are held in values of the same type as
//! the parameters they belong to, so optimizers and checkers work through
//! the [`ParamSet`] trait alone.

mod sage;

pub use sage::{Activation, GnnConfig, GnnNet, SageCache, SageLayer, SampleTree};

use std::fmt::Write as _;

use thiserror::Error;

use crate::rng::SeedStream;

#[derive(Debug, Error, PartialEq)]
pub enum NnError {
    #[error("non-finite gradient in parameter {0}")]
    NonFiniteGradient(String),
    #[error("non-finite loss")]
    NonFiniteLoss,
    #[error("class {class} out of range for {n} logits")]
    ClassOutOfRange { class: usize, n: usize },
    #[error("shape mismatch for {name}: expected {expected:?}, found {found:?}")]
    Shape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("checkpoint line {line}: {reason}")]
    Checkpoint { line: usize, reason: String },
    #[error("bad network configuration: {0}")]
    Config(String),
}

/// Row-major dense tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), data.len(), "tensor data does not match shape");
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        Self::from_vec(&[rows, cols], data)
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Glorot (Xavier) uniform initialization of a `rows × cols` matrix.
    pub fn glorot(rows: usize, cols: usize, rng: &mut SeedStream) -> Self {
        let limit = (6.0 / (rows + cols) as f64).sqrt();
        let data = (0..rows * cols).map(|_| (2.0 * rng.next_f64() - 1.0) * limit).collect();
        Self::matrix(rows, cols, data)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        if self.shape.len() > 1 {
            self.shape[1]
        } else {
            1
        }
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn fill(&mut self, v: f64) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn shape_string(&self) -> String {
        self.shape.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x")
    }
}

/// `y += a * x`
#[inline]
pub(crate) fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    // four running sums so the loop vectorizes; the order is still fixed
    let n = a.len().min(b.len());
    let (a4, b4) = (a[..n].chunks_exact(4), b[..n].chunks_exact(4));
    let (ra, rb) = (a4.remainder(), b4.remainder());
    let mut acc = [0.0; 4];
    for (x, y) in a4.zip(b4) {
        for k in 0..4 {
            acc[k] += x[k] * y[k];
        }
    }
    let tail: f64 = ra.iter().zip(rb).map(|(x, y)| x * y).sum();
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// `y = x · W` for a `d_in × d_out` matrix, accumulated into `y`.
pub(crate) fn vec_mat_acc(y: &mut [f64], x: &[f64], w: &Tensor) {
    for (j, &xj) in x.iter().enumerate() {
        if xj != 0.0 {
            axpy(y, xj, w.row(j));
        }
    }
}

/// `dx = W · dy`, accumulated into `dx`.
pub(crate) fn mat_vec_acc(dx: &mut [f64], w: &Tensor, dy: &[f64]) {
    for (j, d) in dx.iter_mut().enumerate() {
        *d += dot(w.row(j), dy);
    }
}

/// `G += x ⊗ dy`
pub(crate) fn outer_acc(g: &mut Tensor, x: &[f64], dy: &[f64]) {
    for (j, &xj) in x.iter().enumerate() {
        if xj != 0.0 {
            axpy(g.row_mut(j), xj, dy);
        }
    }
}

/// Anything that exposes an ordered list of named parameter tensors.
/// Gradients use the same type, so the orders always agree.
pub trait ParamSet {
    fn tensors(&self) -> Vec<(String, &Tensor)>;
    fn tensors_mut(&mut self) -> Vec<&mut Tensor>;

    fn n_params(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    fn zero(&mut self) {
        for t in self.tensors_mut() {
            t.fill(0.0);
        }
    }

    fn scale(&mut self, a: f64) {
        for t in self.tensors_mut() {
            t.data.iter_mut().for_each(|x| *x *= a);
        }
    }
}

/// Affine map `y = x · W + b`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub w: Tensor,
    pub b: Tensor,
}

impl Dense {
    pub fn new(d_in: usize, d_out: usize, rng: &mut SeedStream) -> Self {
        Dense {
            w: Tensor::glorot(d_in, d_out, rng),
            b: Tensor::zeros(&[d_out]),
        }
    }

    pub fn zeros(d_in: usize, d_out: usize) -> Self {
        Dense {
            w: Tensor::zeros(&[d_in, d_out]),
            b: Tensor::zeros(&[d_out]),
        }
    }

    pub fn d_in(&self) -> usize {
        self.w.rows()
    }

    pub fn d_out(&self) -> usize {
        self.w.cols()
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let mut y = self.b.data.clone();
        vec_mat_acc(&mut y, x, &self.w);
        y
    }

    /// Accumulates parameter gradients into `grads` and returns `dL/dx`.
    pub fn backward(&self, x: &[f64], dy: &[f64], grads: &mut Dense) -> Vec<f64> {
        axpy(&mut grads.b.data, 1.0, dy);
        outer_acc(&mut grads.w, x, dy);
        let mut dx = vec![0.0; x.len()];
        mat_vec_acc(&mut dx, &self.w, dy);
        dx
    }

    pub fn tensors_named(&self, prefix: &str) -> Vec<(String, &Tensor)> {
        vec![(format!("{prefix}.w"), &self.w), (format!("{prefix}.b"), &self.b)]
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.w, &mut self.b]
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|e| e / sum).collect()
}

/// Cross-entropy of `softmax(logits)` against `class`, with its gradient
/// with respect to the logits (`softmax - onehot`).
pub fn loss_softmax_xent(logits: &[f64], class: usize) -> Result<(f64, Vec<f64>), NnError> {
    if class >= logits.len() {
        return Err(NnError::ClassOutOfRange {
            class,
            n: logits.len(),
        });
    }
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = logits.iter().map(|&z| (z - max).exp()).sum();
    let lse = max + sum.ln();
    let loss = lse - logits[class];
    if !loss.is_finite() {
        return Err(NnError::NonFiniteLoss);
    }
    let mut grad: Vec<f64> = logits.iter().map(|&z| (z - lse).exp()).collect();
    grad[class] -= 1.0;
    Ok((loss, grad))
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Binary cross-entropy on a single logit, with `dL/dscore`.
pub fn loss_logistic(score: f64, label: bool) -> Result<(f64, f64), NnError> {
    // softplus(-z) for positives, softplus(z) for negatives
    let z = if label { -score } else { score };
    let loss = z.max(0.0) + (-z.abs()).exp().ln_1p();
    if !loss.is_finite() {
        return Err(NnError::NonFiniteLoss);
    }
    let y = if label { 1.0 } else { 0.0 };
    Ok((loss, sigmoid(score) - y))
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Moment estimates for [`adam_step`].
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub t: u64,
}

impl AdamState {
    pub fn new<P: ParamSet>(params: &P) -> Self {
        let zeros: Vec<Tensor> = params.tensors().iter().map(|(_, t)| Tensor::zeros(&t.shape)).collect();
        AdamState {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig { lr, ..Self::default() }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam update. Parameters are left untouched if any
/// gradient entry is non-finite.
pub fn adam_step<P: ParamSet>(params: &mut P, grads: &P, state: &mut AdamState, cfg: &AdamConfig) -> Result<(), NnError> {
    let named = grads.tensors();
    for (name, g) in &named {
        if g.data.iter().any(|x| !x.is_finite()) {
            return Err(NnError::NonFiniteGradient(name.clone()));
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    let step = cfg.lr / c1;
    let c2s = c2.sqrt();
    for (((p, (_, g)), m), v) in params
        .tensors_mut()
        .into_iter()
        .zip(&named)
        .zip(state.m.iter_mut())
        .zip(state.v.iter_mut())
    {
        let n = p.data.len();
        let (p, g, m, v) = (&mut p.data[..n], &g.data[..n], &mut m.data[..n], &mut v.data[..n]);
        for i in 0..n {
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
            p[i] -= step * m[i] / (v[i].sqrt() / c2s + cfg.eps);
        }
    }
    Ok(())
}

/// Result of comparing analytic gradients with central differences.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub passed: bool,
    pub max_rel_error: f64,
    /// Parameter holding the largest relative error.
    pub worst_param: String,
    /// `(param, flat index, analytic, numeric)` for every failing entry.
    pub failures: Vec<(String, usize, f64, f64)>,
    pub checked: usize,
}

pub const GRAD_CHECK_STEP: f64 = 1e-5;

/// Relative error `|a - n| / max(|a|, |n|, 1e-3)`; the floor keeps
/// near-zero gradients from reporting huge ratios of rounding noise.
pub fn relative_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-3)
}

/// Compares `analytic` against central differences of `loss` around
/// `params` (step [`GRAD_CHECK_STEP`]). `loss` must be deterministic.
pub fn grad_check<P: ParamSet>(
    params: &mut P,
    analytic: &P,
    mut loss: impl FnMut(&P) -> f64,
    tolerance: f64,
) -> GradCheckReport {
    let shapes: Vec<(String, usize)> = params.tensors().iter().map(|(n, t)| (n.clone(), t.len())).collect();
    let analytic: Vec<Vec<f64>> = analytic.tensors().iter().map(|(_, t)| t.data.clone()).collect();
    let mut report = GradCheckReport {
        passed: true,
        max_rel_error: 0.0,
        worst_param: String::new(),
        failures: Vec::new(),
        checked: 0,
    };
    for (ti, (name, len)) in shapes.iter().enumerate() {
        for k in 0..*len {
            let orig = params.tensors_mut()[ti].data[k];
            params.tensors_mut()[ti].data[k] = orig + GRAD_CHECK_STEP;
            let up = loss(params);
            params.tensors_mut()[ti].data[k] = orig - GRAD_CHECK_STEP;
            let down = loss(params);
            params.tensors_mut()[ti].data[k] = orig;
            let numeric = (up - down) / (2.0 * GRAD_CHECK_STEP);
            let a = analytic[ti][k];
            let err = relative_error(a, numeric);
            report.checked += 1;
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst_param = name.clone();
            }
            if !(err <= tolerance) {
                report.passed = false;
                report.failures.push((name.clone(), k, a, numeric));
            }
        }
    }
    report
}

pub const CHECKPOINT_HEADER: &str = "#dge-model v1";

/// Renders named tensors as checkpoint records (no header).
pub fn tensors_to_text(tensors: &[(String, &Tensor)]) -> String {
    let mut out = String::new();
    for (name, t) in tensors {
        write!(out, "{name}\t{}", t.shape_string()).unwrap();
        for v in &t.data {
            write!(out, "\t{v}").unwrap();
        }
        out.push('\n');
    }
    out
}

/// Parses one checkpoint record into `(name, tensor)`.
pub fn parse_tensor_line(line: &str, lineno: usize) -> Result<(String, Tensor), NnError> {
    let bad = |reason: String| NnError::Checkpoint { line: lineno, reason };
    let mut fields = line.split('\t');
    let name = fields.next().filter(|n| !n.is_empty()).ok_or_else(|| bad("missing name".into()))?;
    let shape_field = fields.next().ok_or_else(|| bad("missing shape".into()))?;
    let shape = shape_field
        .split('x')
        .map(|d| d.parse::<usize>())
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| bad(format!("bad shape {shape_field:?}: {e}")))?;
    let data = fields
        .map(|v| v.parse::<f64>())
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| bad(format!("bad value: {e}")))?;
    if data.len() != shape.iter().product::<usize>() {
        return Err(bad(format!("{} values for shape {shape_field}", data.len())));
    }
    Ok((name.to_string(), Tensor { shape, data }))
}

/// Writes `params` into a standalone checkpoint.
pub fn save_params<P: ParamSet>(params: &P) -> String {
    format!("{CHECKPOINT_HEADER}\n{}", tensors_to_text(&params.tensors()))
}

/// Loads checkpoint records into an existing parameter set of the right
/// architecture. Names and shapes must match exactly and in order.
pub fn load_params_into<P: ParamSet>(params: &mut P, text: &str) -> Result<(), NnError> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == CHECKPOINT_HEADER => {}
        _ => {
            return Err(NnError::Checkpoint {
                line: 1,
                reason: format!("expected header {CHECKPOINT_HEADER:?}"),
            })
        }
    }
    let records: Vec<(usize, &str)> = lines.filter(|(_, l)| !l.is_empty() && !l.starts_with('#')).collect();
    load_records_into(params, &records)
}

pub(crate) fn load_records_into<P: ParamSet>(params: &mut P, records: &[(usize, &str)]) -> Result<(), NnError> {
    let expected: Vec<(String, Vec<usize>)> = params.tensors().iter().map(|(n, t)| (n.clone(), t.shape.clone())).collect();
    if records.len() != expected.len() {
        return Err(NnError::Checkpoint {
            line: records.last().map_or(1, |r| r.0 + 1),
            reason: format!("expected {} tensors, found {}", expected.len(), records.len()),
        });
    }
    let mut parsed = Vec::with_capacity(records.len());
    for ((lineno, line), (name, shape)) in records.iter().zip(&expected) {
        let (n, t) = parse_tensor_line(line, lineno + 1)?;
        if &n != name {
            return Err(NnError::Checkpoint {
                line: lineno + 1,
                reason: format!("expected tensor {name}, found {n}"),
            });
        }
        if &t.shape != shape {
            return Err(NnError::Shape {
                name: n,
                expected: shape.clone(),
                found: t.shape,
            });
        }
        parsed.push(t);
    }
    for (dst, src) in params.tensors_mut().into_iter().zip(parsed) {
        *dst = src;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[derive(Clone, Debug, PartialEq)]
    struct Scalar(Tensor);

    impl ParamSet for Scalar {
        fn tensors(&self) -> Vec<(String, &Tensor)> {
            vec![("x".into(), &self.0)]
        }
        fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
            vec![&mut self.0]
        }
    }

    fn scalar(v: f64) -> Scalar {
        Scalar(Tensor::from_vec(&[1], vec![v]))
    }

    #[test]
    fn xent_symmetric_and_stable() {
        let (l, g) = loss_softmax_xent(&[0.0, 0.0], 0).unwrap();
        assert!((l - 2f64.ln()).abs() < 1e-15);
        assert_eq!(g, vec![-0.5, 0.5]);
        let (l, g) = loss_softmax_xent(&[1000.0, 0.0], 0).unwrap();
        assert!(l.abs() < 1e-300 || l < 1e-12);
        assert!(g.iter().all(|x| x.is_finite()));
        assert_eq!(
            loss_softmax_xent(&[0.0], 3),
            Err(NnError::ClassOutOfRange { class: 3, n: 1 })
        );
    }

    #[test]
    fn xent_matches_direct_formula() {
        // Direct evaluation, fine at these magnitudes.
        let z = [0.3, -1.2, 2.5, 0.7];
        let denom: f64 = z.iter().map(|v: &f64| v.exp()).sum();
        let want = -(z[2].exp() / denom).ln();
        let (l, g) = loss_softmax_xent(&z, 2).unwrap();
        assert!((l - want).abs() < 1e-14);
        assert!((g.iter().sum::<f64>()).abs() < 1e-15);
        assert!((g[0] - z[0].exp() / denom).abs() < 1e-15);
    }

    #[test]
    fn logistic_cases() {
        let (l, g) = loss_logistic(0.0, true).unwrap();
        assert!((l - 2f64.ln()).abs() < 1e-15);
        assert_eq!(g, -0.5);
        let (l, _) = loss_logistic(40.0, true).unwrap();
        assert!(l < 1e-15);
        let (l, g) = loss_logistic(1.7, false).unwrap();
        let p = 1.0 / (1.0 + (-1.7f64).exp());
        assert!((l + (1.0 - p).ln()).abs() < 1e-14);
        assert!((g - p).abs() < 1e-15);
    }

    #[test]
    fn adam_zero_gradient_is_noop() {
        let mut p = scalar(1.5);
        let g = scalar(0.0);
        let mut st = AdamState::new(&p);
        adam_step(&mut p, &g, &mut st, &AdamConfig::default()).unwrap();
        assert_eq!(p, scalar(1.5));
    }

    #[test]
    fn adam_first_step_is_lr_sign() {
        for g in [3.0, -0.02] {
            let mut p = scalar(0.0);
            let mut st = AdamState::new(&p);
            adam_step(&mut p, &scalar(g), &mut st, &AdamConfig::with_lr(0.01)).unwrap();
            assert!((p.0.data[0] + 0.01 * g.signum()).abs() < 1e-8);
        }
    }

    #[test]
    fn adam_three_step_trace() {
        // Textbook recursion written out longhand.
        let (lr, b1, b2, eps) = (0.01, 0.9, 0.999, 1e-8);
        let grads = [0.5, -1.0, 0.25];
        let (mut x, mut m, mut v) = (1.0f64, 0.0f64, 0.0f64);
        let mut want = Vec::new();
        for (t, g) in grads.iter().enumerate() {
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t as i32 + 1));
            let vh = v / (1.0 - b2.powi(t as i32 + 1));
            x -= lr * mh / (vh.sqrt() + eps);
            want.push(x);
        }
        let mut p = scalar(1.0);
        let mut st = AdamState::new(&p);
        for (g, w) in grads.iter().zip(want) {
            adam_step(&mut p, &scalar(*g), &mut st, &AdamConfig::with_lr(lr)).unwrap();
            assert!((p.0.data[0] - w).abs() < 1e-12, "{} vs {w}", p.0.data[0]);
        }
    }

    #[test]
    fn adam_rejects_non_finite() {
        let mut p = scalar(1.0);
        let mut st = AdamState::new(&p);
        let err = adam_step(&mut p, &scalar(f64::NAN), &mut st, &AdamConfig::default());
        assert_eq!(err, Err(NnError::NonFiniteGradient("x".into())));
        assert_eq!(p, scalar(1.0));
    }

    #[test]
    fn dense_grad_check() {
        let mut rng = SeedStream::new(4, &[0]);
        #[derive(Clone)]
        struct D(Dense);
        impl ParamSet for D {
            fn tensors(&self) -> Vec<(String, &Tensor)> {
                self.0.tensors_named("head")
            }
            fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
                self.0.tensors_mut()
            }
        }
        let mut d = D(Dense::new(3, 4, &mut rng));
        let x = [0.5, -1.0, 2.0];
        let mut g = D(Dense::zeros(3, 4));
        let (_, dz) = loss_softmax_xent(&d.0.forward(&x), 1).unwrap();
        d.0.backward(&x, &dz, &mut g.0);
        let r = grad_check(&mut d, &g, |p| loss_softmax_xent(&p.0.forward(&x), 1).unwrap().0, 1e-6);
        assert!(r.passed, "{r:?}");
        assert_eq!(r.checked, 16);
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let mut rng = SeedStream::new(2, &[0]);
        let p = Scalar(Tensor::glorot(3, 2, &mut rng));
        let text = save_params(&p);
        assert!(text.starts_with("#dge-model v1\nx\t3x2\t"));
        let mut q = Scalar(Tensor::zeros(&[3, 2]));
        load_params_into(&mut q, &text).unwrap();
        assert_eq!(p, q);
        let mut wrong = Scalar(Tensor::zeros(&[2, 3]));
        assert!(matches!(load_params_into(&mut wrong, &text), Err(NnError::Shape { .. })));
    }
}
