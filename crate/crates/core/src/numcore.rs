//! Dense numeric kernel: a one-hidden-layer rectifier backbone shared by up
//! to three linear heads, analytic backpropagation, Adam and EMA.
//!
//! Weights are row-major `(out_dim, in_dim)`. Batched inputs are
//! `(batch, in_dim)` matrices; every forward/backward call works on a whole
//! batch so the heavy products go through a single GEMM.

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::Rng;

use crate::error::{shape_err, Error, Result};

/// Affine map `W x + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Linear {
    pub fn zeros(input: usize, output: usize) -> Self {
        Self {
            weight: Array2::zeros((output, input)),
            bias: Array1::zeros(output),
        }
    }

    /// Uniform in `±1/sqrt(input)` for weights and biases.
    pub fn uniform<R: Rng + ?Sized>(input: usize, output: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (input as f64).sqrt();
        let weight = Array2::from_shape_simple_fn((output, input), || rng.random_range(-bound..bound));
        let bias = Array1::from_shape_simple_fn(output, || rng.random_range(-bound..bound));
        Self { weight, bias }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.nrows()
    }

    pub fn forward_batch(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        if x.ncols() != self.input_dim() {
            return shape_err(format!(
                "linear layer expects {} inputs, got {}",
                self.input_dim(),
                x.ncols()
            ));
        }
        let mut out = x.dot(&self.weight.t());
        out += &self.bias;
        Ok(out)
    }

    fn check(&self) -> Result<()> {
        if self.bias.len() != self.output_dim() {
            return shape_err("bias length differs from weight rows");
        }
        Ok(())
    }
}

/// Rectified hidden features of one input vector.
pub fn backbone_forward(backbone: &Linear, input: &[f64]) -> Result<Vec<f64>> {
    if input.len() != backbone.input_dim() {
        return shape_err(format!(
            "backbone expects {} pixels, got {}",
            backbone.input_dim(),
            input.len()
        ));
    }
    Ok(backbone
        .weight
        .rows()
        .into_iter()
        .zip(backbone.bias.iter())
        .map(|(row, b)| {
            let pre = row.iter().zip(input).map(|(w, x)| w * x).sum::<f64>() + b;
            pre.max(0.0)
        })
        .collect())
}

/// Logits of one hidden vector; no activation.
pub fn head_forward(head: &Linear, hidden: &[f64]) -> Result<Vec<f64>> {
    if hidden.len() != head.input_dim() {
        return shape_err(format!(
            "head expects {} features, got {}",
            head.input_dim(),
            hidden.len()
        ));
    }
    Ok(head
        .weight
        .rows()
        .into_iter()
        .zip(head.bias.iter())
        .map(|(row, b)| row.iter().zip(hidden).map(|(w, h)| w * h).sum::<f64>() + b)
        .collect())
}

fn relu_inplace(a: &mut Array2<f64>) {
    a.mapv_inplace(|v| if v > 0.0 { v } else { 0.0 });
}

/// Backbone plus heads. Heads are indexed by [`HeadRole`].
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub backbone: Linear,
    pub heads: Vec<Linear>,
}

impl Mlp {
    pub fn hidden(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        let mut h = self.backbone.forward_batch(x)?;
        relu_inplace(&mut h);
        Ok(h)
    }

    /// Gradients of every parameter given upstream gradients for some heads.
    ///
    /// `upstream[i]` is `(batch, head_i.output_dim)` or `None` when head `i`
    /// does not contribute to the loss.
    pub fn backward(
        &self,
        x: ArrayView2<'_, f64>,
        hidden: &Array2<f64>,
        upstream: &[Option<ArrayView2<'_, f64>>],
    ) -> Result<Mlp> {
        if upstream.len() != self.heads.len() {
            return shape_err("one upstream slot per head required");
        }
        let mut d_hidden = Array2::<f64>::zeros(hidden.raw_dim());
        let mut head_grads = Vec::with_capacity(self.heads.len());
        for (head, up) in self.heads.iter().zip(upstream) {
            match up {
                Some(up) => {
                    if up.dim() != (hidden.nrows(), head.output_dim()) {
                        return shape_err("upstream gradient shape does not match head output");
                    }
                    head_grads.push(Linear {
                        weight: up.t().dot(hidden),
                        bias: up.sum_axis(Axis(0)),
                    });
                    d_hidden += &up.dot(&head.weight);
                }
                None => head_grads.push(Linear::zeros(head.input_dim(), head.output_dim())),
            }
        }
        Zip::from(&mut d_hidden).and(hidden).for_each(|d, &h| {
            if h <= 0.0 {
                *d = 0.0;
            }
        });
        let backbone = Linear {
            weight: d_hidden.t().dot(&x),
            bias: d_hidden.sum_axis(Axis(0)),
        };
        Ok(Mlp {
            backbone,
            heads: head_grads,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Arch {
    /// One backbone, one q-wide head, all classes trained jointly.
    Det,
    /// One backbone with a scalar head per class.
    Int,
    /// One backbone with image, patch and weight heads.
    PatT,
}

impl Arch {
    pub fn code(self) -> u32 {
        match self {
            Arch::Det => 0,
            Arch::Int => 1,
            Arch::PatT => 2,
        }
    }

    pub fn from_code(code: u32) -> Result<Self> {
        match code {
            0 => Ok(Arch::Det),
            1 => Ok(Arch::Int),
            2 => Ok(Arch::PatT),
            other => Err(Error::Format(format!("unknown model mode code {other}"))),
        }
    }

    pub fn heads_per_net(self) -> usize {
        match self {
            Arch::Det | Arch::Int => 1,
            Arch::PatT => 3,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Arch::Det => "det",
            Arch::Int => "int",
            Arch::PatT => "pat-t",
        }
    }
}

impl std::str::FromStr for Arch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "det" => Ok(Arch::Det),
            "int" => Ok(Arch::Int),
            "pat-t" | "pat_t" => Ok(Arch::PatT),
            other => Err(Error::Config(format!("unknown training mode '{other}'"))),
        }
    }
}

impl std::fmt::Display for Arch {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum HeadRole {
    /// `h_phi`: logits on whole images.
    Image,
    /// `h_psi`: logits on patches.
    Patch,
    /// `h_theta`: logits that only feed the patch weights.
    Weight,
}

impl HeadRole {
    pub fn index(self) -> usize {
        match self {
            HeadRole::Image => 0,
            HeadRole::Patch => 1,
            HeadRole::Weight => 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dims {
    /// Image side `S`; inputs have `S*S` pixels.
    pub side: usize,
    pub hidden: usize,
    pub classes: usize,
}

impl Dims {
    pub fn input_len(&self) -> usize {
        self.side * self.side
    }
}

/// All trainable parameters of a model in one of the three architectures.
///
/// `Det` and `PatT` hold exactly one net whose heads are `classes` wide.
/// `Int` holds one net per class, each with a single scalar head.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub arch: Arch,
    pub dims: Dims,
    pub nets: Vec<Mlp>,
}

/// Activations kept from a forward pass for use in [`ModelParams::backward`].
#[derive(Debug, Clone)]
pub struct ForwardPass {
    pub hidden: Vec<Array2<f64>>,
    /// One `(batch, classes)` logit matrix per requested role.
    pub logits: Vec<Array2<f64>>,
}

impl ModelParams {
    fn build(arch: Arch, dims: Dims, mut make: impl FnMut(usize, usize) -> Linear) -> Self {
        let (n_nets, width) = match arch {
            Arch::Int => (dims.classes, 1),
            Arch::Det | Arch::PatT => (1, dims.classes),
        };
        let nets = (0..n_nets)
            .map(|_| {
                let backbone = make(dims.input_len(), dims.hidden);
                let heads = (0..arch.heads_per_net()).map(|_| make(dims.hidden, width)).collect();
                Mlp { backbone, heads }
            })
            .collect();
        Self { arch, dims, nets }
    }

    pub fn init<R: Rng + ?Sized>(arch: Arch, dims: Dims, rng: &mut R) -> Self {
        Self::build(arch, dims, |i, o| Linear::uniform(i, o, rng))
    }

    pub fn zeros(arch: Arch, dims: Dims) -> Self {
        Self::build(arch, dims, Linear::zeros)
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.arch, self.dims)
    }

    pub fn validate(&self) -> Result<()> {
        let expected_nets = match self.arch {
            Arch::Int => self.dims.classes,
            _ => 1,
        };
        if self.nets.len() != expected_nets {
            return shape_err(format!(
                "{} model needs {} nets, found {}",
                self.arch.name(),
                expected_nets,
                self.nets.len()
            ));
        }
        let width = if self.arch == Arch::Int { 1 } else { self.dims.classes };
        for net in &self.nets {
            net.backbone.check()?;
            if net.backbone.input_dim() != self.dims.input_len()
                || net.backbone.output_dim() != self.dims.hidden
            {
                return shape_err("backbone dimensions disagree with model dims");
            }
            if net.heads.len() != self.arch.heads_per_net() {
                return shape_err("wrong number of heads");
            }
            for head in &net.heads {
                head.check()?;
                if head.input_dim() != self.dims.hidden || head.output_dim() != width {
                    return shape_err("head dimensions disagree with model dims");
                }
            }
        }
        if self.arrays().iter().any(|a| a.iter().any(|v| !v.is_finite())) {
            return Err(Error::Model("parameters contain non-finite values".into()));
        }
        Ok(())
    }

    pub fn has_role(&self, role: HeadRole) -> bool {
        role.index() < self.arch.heads_per_net()
    }

    /// Parameter arrays in declaration order: per net, backbone weight and
    /// bias, then each head's weight and bias.
    pub fn arrays(&self) -> Vec<&[f64]> {
        let mut out = Vec::new();
        for net in &self.nets {
            for layer in std::iter::once(&net.backbone).chain(&net.heads) {
                out.push(layer.weight.as_slice().expect("standard layout"));
                out.push(layer.bias.as_slice().expect("standard layout"));
            }
        }
        out
    }

    pub fn arrays_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::new();
        for net in &mut self.nets {
            for layer in std::iter::once(&mut net.backbone).chain(net.heads.iter_mut()) {
                out.push(layer.weight.as_slice_mut().expect("standard layout"));
                out.push(layer.bias.as_slice_mut().expect("standard layout"));
            }
        }
        out
    }

    pub fn num_params(&self) -> usize {
        self.arrays().iter().map(|a| a.len()).sum()
    }

    pub fn forward(&self, x: ArrayView2<'_, f64>, roles: &[HeadRole]) -> Result<ForwardPass> {
        if x.ncols() != self.dims.input_len() {
            return shape_err(format!(
                "model expects {} pixels per input, got {}",
                self.dims.input_len(),
                x.ncols()
            ));
        }
        for &role in roles {
            if !self.has_role(role) {
                return Err(Error::Model(format!(
                    "{} model has no {:?} head",
                    self.arch.name(),
                    role
                )));
            }
        }
        let mut hidden = Vec::with_capacity(self.nets.len());
        let mut logits: Vec<Array2<f64>> = roles
            .iter()
            .map(|_| Array2::zeros((x.nrows(), self.dims.classes)))
            .collect();
        for (k, net) in self.nets.iter().enumerate() {
            let h = net.hidden(x)?;
            for (slot, &role) in logits.iter_mut().zip(roles) {
                let out = net.heads[role.index()].forward_batch(h.view())?;
                if self.arch == Arch::Int {
                    slot.column_mut(k).assign(&out.column(0));
                } else {
                    *slot = out;
                }
            }
            hidden.push(h);
        }
        Ok(ForwardPass { hidden, logits })
    }

    /// Convenience wrapper returning the logits of a single head.
    pub fn logits(&self, x: ArrayView2<'_, f64>, role: HeadRole) -> Result<Array2<f64>> {
        Ok(self.forward(x, &[role])?.logits.pop().expect("one role"))
    }

    /// Parameter gradients given `(batch, classes)` upstream gradients for
    /// the heads listed in `roles` (the same roles used for `pass`).
    pub fn backward(
        &self,
        x: ArrayView2<'_, f64>,
        pass: &ForwardPass,
        roles: &[HeadRole],
        upstream: &[Array2<f64>],
    ) -> Result<ModelParams> {
        if roles.len() != upstream.len() || pass.hidden.len() != self.nets.len() {
            return shape_err("forward pass does not match backward request");
        }
        let mut nets = Vec::with_capacity(self.nets.len());
        for (k, (net, hidden)) in self.nets.iter().zip(&pass.hidden).enumerate() {
            let mut slots: Vec<Option<ArrayView2<'_, f64>>> = vec![None; net.heads.len()];
            for (&role, up) in roles.iter().zip(upstream) {
                if up.dim() != (x.nrows(), self.dims.classes) {
                    return shape_err("upstream gradient must be (batch, classes)");
                }
                slots[role.index()] = Some(if self.arch == Arch::Int {
                    up.slice(ndarray::s![.., k..k + 1])
                } else {
                    up.view()
                });
            }
            nets.push(net.backward(x, hidden, &slots)?);
        }
        Ok(ModelParams {
            arch: self.arch,
            dims: self.dims,
            nets,
        })
    }

    /// Splits an `Int` model into single-class members.
    pub fn int_members(&self) -> Result<Vec<ModelParams>> {
        if self.arch != Arch::Int {
            return Err(Error::Model("only int models have members".into()));
        }
        Ok(self
            .nets
            .iter()
            .map(|net| ModelParams {
                arch: Arch::Int,
                dims: Dims { classes: 1, ..self.dims },
                nets: vec![net.clone()],
            })
            .collect())
    }

    /// Concatenates `Int` members (in class order) into one model.
    pub fn assemble_int(members: Vec<ModelParams>) -> Result<ModelParams> {
        let first = members
            .first()
            .ok_or_else(|| Error::Model("no int members to assemble".into()))?;
        let dims = first.dims;
        let mut nets = Vec::new();
        for m in members.iter() {
            if m.arch != Arch::Int || m.dims.side != dims.side || m.dims.hidden != dims.hidden {
                return Err(Error::Model("incompatible int members".into()));
            }
            nets.extend(m.nets.iter().cloned());
        }
        let model = ModelParams {
            arch: Arch::Int,
            dims: Dims {
                classes: nets.len(),
                ..dims
            },
            nets,
        };
        model.validate()?;
        Ok(model)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AdamState {
    pub first: ModelParams,
    pub second: ModelParams,
    pub step: u64,
    pub hyper: AdamHyper,
}

impl AdamState {
    pub fn new(params: &ModelParams, hyper: AdamHyper) -> Self {
        Self {
            first: params.zeros_like(),
            second: params.zeros_like(),
            step: 0,
            hyper,
        }
    }
}

fn same_layout(a: &ModelParams, b: &ModelParams) -> bool {
    let (xa, xb) = (a.arrays(), b.arrays());
    xa.len() == xb.len() && xa.iter().zip(&xb).all(|(p, q)| p.len() == q.len())
}

/// One bias-corrected Adam update, in place. Nothing is modified when the
/// gradient contains a non-finite entry.
pub fn adam_step(
    params: &mut ModelParams,
    grads: &ModelParams,
    state: &mut AdamState,
    lr: f64,
) -> Result<()> {
    if !(lr > 0.0 && lr.is_finite()) {
        return Err(Error::Config(format!("learning rate must be positive, got {lr}")));
    }
    if !same_layout(params, grads) || !same_layout(params, &state.first) {
        return shape_err("gradient or optimizer state layout differs from parameters");
    }
    let next = state.step + 1;
    if grads.arrays().iter().any(|a| a.iter().any(|g| !g.is_finite())) {
        return Err(Error::NonFinite {
            step: next,
            what: "gradient".into(),
        });
    }
    state.step = next;
    let AdamHyper { beta1, beta2, eps } = state.hyper;
    let t = next as i32;
    let c1 = 1.0 - beta1.powi(t);
    let c2 = 1.0 - beta2.powi(t);
    let g_all = grads.arrays();
    let m_all = state.first.arrays_mut();
    let v_all = state.second.arrays_mut();
    for (((p, g), m), v) in params.arrays_mut().into_iter().zip(g_all).zip(m_all).zip(v_all) {
        for i in 0..p.len() {
            m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
            v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// `avg <- decay * avg + (1 - decay) * current`, elementwise.
pub fn ema_update(avg: &mut ModelParams, current: &ModelParams, decay: f64) -> Result<()> {
    if !(0.0..1.0).contains(&decay) {
        return Err(Error::Config(format!("ema decay must lie in [0, 1), got {decay}")));
    }
    if !same_layout(avg, current) {
        return shape_err("ema layout differs from parameters");
    }
    for (a, c) in avg.arrays_mut().into_iter().zip(current.arrays()) {
        for (x, &y) in a.iter_mut().zip(c) {
            if *x != y {
                *x = decay * *x + (1.0 - decay) * y;
            }
        }
    }
    Ok(())
}
