//! A small fully-connected dropout network with a learned noise-variance head.
//!
//! Each hidden layer is `tanh(W h + b)` followed by inverted dropout, which
//! stays active at prediction time. The head emits a logit `F` and a raw
//! variance `v`; a sample is `sigmoid(F + sqrt(softplus(v)) * eps)` with
//! `eps ~ N(0, 1)`. Training minimises the weighted binary cross-entropy of
//! each of the `T` samples, averaged.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::rng::SimRng;
use crate::volume::{Dims, GridKind, SampleStack, VoxelGrid};

pub const WEIGHTS_MAGIC: &[u8; 4] = b"UQNW";
pub const WEIGHTS_VERSION: u16 = 1;
/// Probabilities are clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]` in the loss.
pub const PROB_CLAMP: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub rows: usize,
    pub cols: usize,
    /// Row-major `rows x cols`.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Layer {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Layer { rows, cols, weights: vec![0.0; rows * cols], bias: vec![0.0; rows] }
    }

    fn apply(&self, input: &[f64], out: &mut Vec<f64>) {
        out.clear();
        out.extend(self.weights.chunks_exact(self.cols).zip(&self.bias).map(|(row, b)| {
            row.iter().zip(input).map(|(w, x)| w * x).sum::<f64>() + b
        }));
    }

    /// Weights then biases.
    pub fn params(&self) -> impl Iterator<Item = &f64> {
        self.weights.iter().chain(&self.bias)
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.weights.iter_mut().chain(self.bias.iter_mut())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyNet {
    /// Hidden layers followed by the two-row head (row 0 logit, row 1 raw variance).
    pub layers: Vec<Layer>,
    pub dropout: f64,
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

fn check_dropout(p: f64) -> Result<()> {
    if (0.0..1.0).contains(&p) {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("dropout {p} outside [0, 1)")))
    }
}

impl ToyNet {
    /// Weights ~ N(0, 1/fan_in), zero biases.
    pub fn new(inputs: usize, hidden: &[usize], dropout: f64, seed: u64) -> Result<Self> {
        check_dropout(dropout)?;
        if inputs == 0 || hidden.is_empty() || hidden.contains(&0) {
            return Err(Error::InvalidArgument("network needs inputs and at least one non-empty hidden layer".into()));
        }
        let mut rng = SimRng::new(seed);
        let mut layers = Vec::with_capacity(hidden.len() + 1);
        let mut cols = inputs;
        for &rows in hidden.iter().chain(std::iter::once(&2)) {
            let mut l = Layer::zeros(rows, cols);
            let scale = (1.0 / cols as f64).sqrt();
            for w in &mut l.weights {
                *w = scale * rng.normal();
            }
            layers.push(l);
            cols = rows;
        }
        Ok(ToyNet { layers, dropout })
    }

    pub fn inputs(&self) -> usize {
        self.layers[0].cols
    }

    pub fn hidden_sizes(&self) -> Vec<usize> {
        self.layers[..self.layers.len() - 1].iter().map(|l| l.rows).collect()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    pub fn params(&self) -> impl Iterator<Item = &f64> {
        self.layers.iter().flat_map(Layer::params)
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.layers.iter_mut().flat_map(Layer::params_mut)
    }

    fn head(&self) -> &Layer {
        self.layers.last().expect("network has a head")
    }

    fn validate(&self) -> Result<()> {
        check_dropout(self.dropout)?;
        if self.layers.len() < 2 || self.head().rows != 2 {
            return Err(Error::Format("network needs hidden layers and a two-row head".into()));
        }
        for pair in self.layers.windows(2) {
            if pair[1].cols != pair[0].rows {
                return Err(Error::Format(format!(
                    "layer shapes do not chain: {} outputs into {} inputs",
                    pair[0].rows, pair[1].cols
                )));
            }
        }
        for l in &self.layers {
            if l.weights.len() != l.rows * l.cols || l.bias.len() != l.rows || l.rows == 0 || l.cols == 0 {
                return Err(Error::Format("layer storage does not match its shape".into()));
            }
        }
        if let Some(v) = self.params().find(|v| !v.is_finite()) {
            return Err(Error::Format(format!("non-finite weight {v}")));
        }
        Ok(())
    }

    fn check_patch(&self, patch: &[f64]) -> Result<()> {
        if patch.len() == self.inputs() {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!(
                "patch has {} values, network expects {}",
                patch.len(),
                self.inputs()
            )))
        }
    }
}

/// Frozen stochastic draws for one forward pass: a dropout scale per hidden
/// unit (0 or `1 / (1 - p)`) and one standard normal.
#[derive(Debug, Clone, PartialEq)]
pub struct Draws {
    pub masks: Vec<Vec<f64>>,
    pub eps: f64,
}

impl Draws {
    /// Masks are drawn layer by layer, unit by unit, then `eps`.
    pub fn sample(net: &ToyNet, rng: &mut SimRng) -> Self {
        let keep = 1.0 / (1.0 - net.dropout);
        let masks = net
            .hidden_sizes()
            .into_iter()
            .map(|n| (0..n).map(|_| if rng.uniform() < net.dropout { 0.0 } else { keep }).collect())
            .collect();
        Draws { masks, eps: rng.normal() }
    }

    /// No dropout and no noise.
    pub fn identity(net: &ToyNet) -> Self {
        Draws { masks: net.hidden_sizes().into_iter().map(|n| vec![1.0; n]).collect(), eps: 0.0 }
    }
}

#[derive(Debug, Clone)]
struct Trace {
    /// Post-dropout activations; `acts[0]` is the input.
    acts: Vec<Vec<f64>>,
    /// Pre-dropout tanh outputs per hidden layer.
    tanh: Vec<Vec<f64>>,
    raw_var: f64,
    var: f64,
    prob: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleOutput {
    pub prob: f64,
    pub var: f64,
    pub logit: f64,
}

fn forward_trace(net: &ToyNet, patch: &[f64], draws: &Draws) -> (Trace, f64) {
    let hidden = net.layers.len() - 1;
    let mut acts = Vec::with_capacity(hidden + 1);
    let mut tanh = Vec::with_capacity(hidden);
    acts.push(patch.to_vec());
    let mut buf = Vec::new();
    for (l, mask) in net.layers[..hidden].iter().zip(&draws.masks) {
        l.apply(acts.last().expect("input present"), &mut buf);
        let t: Vec<f64> = buf.iter().map(|a| a.tanh()).collect();
        acts.push(t.iter().zip(mask).map(|(h, m)| h * m).collect());
        tanh.push(t);
    }
    net.head().apply(acts.last().expect("hidden output present"), &mut buf);
    let (logit, raw_var) = (buf[0], buf[1]);
    let var = softplus(raw_var);
    let z = logit + var.sqrt() * draws.eps;
    (Trace { acts, tanh, raw_var, var, prob: sigmoid(z) }, logit)
}

/// One forward pass with the given draws.
pub fn forward_with(net: &ToyNet, patch: &[f64], draws: &Draws) -> Result<SampleOutput> {
    net.check_patch(patch)?;
    if draws.masks.len() != net.layers.len() - 1
        || draws.masks.iter().zip(net.hidden_sizes()).any(|(m, n)| m.len() != n)
    {
        return Err(Error::InvalidArgument("draws do not match the network shape".into()));
    }
    let (t, logit) = forward_trace(net, patch, draws);
    Ok(SampleOutput { prob: t.prob, var: t.var, logit })
}

/// One stochastic forward pass: `(prediction, learned variance)`.
pub fn forward_sample(net: &ToyNet, patch: &[f64], rng: &mut SimRng) -> Result<(f64, f64)> {
    let draws = Draws::sample(net, rng);
    forward_with(net, patch, &draws).map(|o| (o.prob, o.var))
}

/// Weighted binary cross-entropy on a clamped probability.
pub fn weighted_bce(prob: f64, label: f64, class_weight: f64) -> f64 {
    let p = prob.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
    -(class_weight * label * p.ln() + (1.0 - label) * (1.0 - p).ln())
}

fn check_label(label: f64) -> Result<()> {
    if label == 0.0 || label == 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("label {label} is not 0 or 1")))
    }
}

/// Loss averaged over `draws`, accumulating `scale` times its gradient into `grad`.
fn loss_and_backprop(
    net: &ToyNet,
    patch: &[f64],
    label: f64,
    class_weight: f64,
    draws: &[Draws],
    scale: f64,
    grad: &mut [Layer],
) -> f64 {
    let hidden = net.layers.len() - 1;
    let t_inv = 1.0 / draws.len() as f64;
    let mut total = 0.0;
    for d in draws {
        let (tr, _) = forward_trace(net, patch, d);
        total += weighted_bce(tr.prob, label, class_weight);
        let clamped = tr.prob < PROB_CLAMP || tr.prob > 1.0 - PROB_CLAMP;
        let dz = if clamped {
            0.0
        } else {
            -class_weight * label * (1.0 - tr.prob) + (1.0 - label) * tr.prob
        } * t_inv
            * scale;
        let d_logit = dz;
        let d_raw = if tr.var > 0.0 { dz * d.eps / (2.0 * tr.var.sqrt()) * sigmoid(tr.raw_var) } else { 0.0 };

        let mut delta = vec![d_logit, d_raw];
        for li in (0..=hidden).rev() {
            let layer = &net.layers[li];
            let input = &tr.acts[li];
            let g = &mut grad[li];
            for (r, &dr) in delta.iter().enumerate() {
                if dr == 0.0 {
                    continue;
                }
                g.bias[r] += dr;
                for (gw, x) in g.weights[r * layer.cols..(r + 1) * layer.cols].iter_mut().zip(input) {
                    *gw += dr * x;
                }
            }
            if li == 0 {
                break;
            }
            // back through dropout and tanh of layer li - 1
            let mut prev = vec![0.0; layer.cols];
            for (r, &dr) in delta.iter().enumerate() {
                for (p, w) in prev.iter_mut().zip(&layer.weights[r * layer.cols..(r + 1) * layer.cols]) {
                    *p += dr * w;
                }
            }
            let (t, m) = (&tr.tanh[li - 1], &d.masks[li - 1]);
            for ((p, h), mk) in prev.iter_mut().zip(t).zip(m) {
                *p *= mk * (1.0 - h * h);
            }
            delta = prev;
        }
    }
    total * t_inv
}

fn zero_grad(net: &ToyNet) -> Vec<Layer> {
    net.layers.iter().map(|l| Layer::zeros(l.rows, l.cols)).collect()
}

/// Mean loss over `T = draws.len()` samples of one example.
pub fn mc_loss_with(net: &ToyNet, patch: &[f64], label: f64, class_weight: f64, draws: &[Draws]) -> Result<f64> {
    net.check_patch(patch)?;
    check_label(label)?;
    if draws.is_empty() {
        return Err(Error::InvalidArgument("at least one MC sample is required".into()));
    }
    Ok(draws
        .iter()
        .map(|d| weighted_bce(forward_trace(net, patch, d).0.prob, label, class_weight))
        .sum::<f64>()
        / draws.len() as f64)
}

pub fn mc_loss(net: &ToyNet, patch: &[f64], label: f64, samples: usize, class_weight: f64, rng: &mut SimRng) -> Result<f64> {
    let draws: Vec<Draws> = (0..samples).map(|_| Draws::sample(net, rng)).collect();
    mc_loss_with(net, patch, label, class_weight, &draws)
}

/// Gradient of [`mc_loss_with`] with respect to every parameter, laid out
/// like `net.layers`.
pub fn mc_loss_gradient(
    net: &ToyNet,
    patch: &[f64],
    label: f64,
    class_weight: f64,
    draws: &[Draws],
) -> Result<(f64, Vec<Layer>)> {
    let loss = mc_loss_with(net, patch, label, class_weight, draws)?;
    let mut grad = zero_grad(net);
    loss_and_backprop(net, patch, label, class_weight, draws, 1.0, &mut grad);
    Ok((loss, grad))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub patches: Vec<Vec<f64>>,
    pub labels: Vec<f64>,
}

impl Dataset {
    pub fn new(patches: Vec<Vec<f64>>, labels: Vec<f64>) -> Result<Self> {
        if patches.len() != labels.len() || patches.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "{} patches with {} labels",
                patches.len(),
                labels.len()
            )));
        }
        let n = patches[0].len();
        if patches.iter().any(|p| p.len() != n) {
            return Err(Error::InvalidArgument("patches differ in length".into()));
        }
        labels.iter().try_for_each(|&l| check_label(l))?;
        if patches.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("patches hold non-finite values".into()));
        }
        Ok(Dataset { patches, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `N / N_pos`, or 1 when there are no positives.
    pub fn inverse_positive_frequency(&self) -> f64 {
        let pos = self.labels.iter().filter(|&&l| l == 1.0).count();
        if pos == 0 {
            1.0
        } else {
            self.len() as f64 / pos as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub samples: usize,
    pub learning_rate: f64,
    pub steps: usize,
    /// Defaults to the inverse positive-class frequency of the dataset.
    pub class_weight: Option<f64>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { samples: 10, learning_rate: 0.5, steps: 1000, class_weight: None, seed: 0 }
    }
}

/// Full-batch gradient descent. Returns the trained net and the loss at
/// the start of each step.
pub fn train(net: &ToyNet, data: &Dataset, cfg: &TrainConfig) -> Result<(ToyNet, Vec<f64>)> {
    if cfg.samples == 0 {
        return Err(Error::InvalidArgument("T_train must be at least 1".into()));
    }
    if !(cfg.learning_rate > 0.0 && cfg.learning_rate.is_finite()) {
        return Err(Error::InvalidArgument(format!("learning rate {} must be positive", cfg.learning_rate)));
    }
    net.validate()?;
    data.patches.first().map_or(Ok(()), |p| net.check_patch(p))?;
    let w = cfg.class_weight.unwrap_or_else(|| data.inverse_positive_frequency());
    if !(w > 0.0 && w.is_finite()) {
        return Err(Error::InvalidArgument(format!("class weight {w} must be positive")));
    }

    let mut net = net.clone();
    let mut rng = SimRng::new(cfg.seed);
    let mut trace = Vec::with_capacity(cfg.steps);
    let scale = 1.0 / data.len() as f64;
    for step in 0..cfg.steps {
        let mut grad = zero_grad(&net);
        let mut loss = 0.0;
        for (patch, &label) in data.patches.iter().zip(&data.labels) {
            let draws: Vec<Draws> = (0..cfg.samples).map(|_| Draws::sample(&net, &mut rng)).collect();
            loss += loss_and_backprop(&net, patch, label, w, &draws, scale, &mut grad) * scale;
        }
        if !loss.is_finite() {
            return Err(Error::Divergence { step, loss });
        }
        trace.push(loss);
        for (p, g) in net.params_mut().zip(grad.iter().flat_map(Layer::params)) {
            *p -= cfg.learning_rate * g;
        }
        if net.params().any(|v| !v.is_finite()) {
            return Err(Error::Divergence { step, loss });
        }
    }
    Ok((net, trace))
}

pub fn loss_trace_csv(trace: &[f64]) -> String {
    let mut s = String::from("step,loss\n");
    for (i, l) in trace.iter().enumerate() {
        s.push_str(&format!("{i},{l}\n"));
    }
    s
}

/// `(2r+1)^2` in-slice neighbourhood of voxel `(x, y, z)`, edge-clamped, x fastest.
pub fn patch_at(values: &[f32], dims: Dims, radius: usize, x: usize, y: usize, z: usize) -> Vec<f64> {
    let r = radius as i64;
    let mut out = Vec::with_capacity((2 * radius + 1).pow(2));
    for dy in -r..=r {
        for dx in -r..=r {
            let px = (x as i64 + dx).clamp(0, dims.nx as i64 - 1) as usize;
            let py = (y as i64 + dy).clamp(0, dims.ny as i64 - 1) as usize;
            out.push(values[dims.index(px, py, z)] as f64);
        }
    }
    out
}

/// Side length `2r + 1` of the square patch matching the network input.
pub fn patch_radius(net: &ToyNet) -> Result<usize> {
    let n = net.inputs();
    let side = (n as f64).sqrt().round() as usize;
    if side * side != n || side % 2 == 0 {
        return Err(Error::InvalidArgument(format!("network input {n} is not an odd square patch")));
    }
    Ok(side / 2)
}

/// `T` dropout passes at every voxel of `image`, each voxel on its own
/// stream derived from `seed` and its linear index.
pub fn mc_predict(net: &ToyNet, image: &VoxelGrid, samples: usize, seed: u64) -> Result<SampleStack> {
    if samples == 0 {
        return Err(Error::InvalidArgument("sample count must be at least 1".into()));
    }
    net.validate()?;
    let radius = patch_radius(net)?;
    let dims = image.dims();
    let values = image.values();
    let per_voxel: Vec<Vec<(f64, f64)>> = (0..dims.len())
        .into_par_iter()
        .map(|i| {
            let [x, y, z] = dims.coords(i);
            let patch = patch_at(values, dims, radius, x, y, z);
            let mut rng = SimRng::derive(seed, i as u64);
            (0..samples)
                .map(|_| {
                    let d = Draws::sample(net, &mut rng);
                    let (tr, _) = forward_trace(net, &patch, &d);
                    (tr.prob, tr.var)
                })
                .collect()
        })
        .collect();
    let mut predictions = Vec::with_capacity(samples);
    let mut variances = Vec::with_capacity(samples);
    for t in 0..samples {
        let p: Vec<f64> = per_voxel.iter().map(|s| s[t].0).collect();
        let v: Vec<f64> = per_voxel.iter().map(|s| s[t].1).collect();
        predictions.push(VoxelGrid::from_f64(dims, GridKind::Probability, &p)?);
        variances.push(VoxelGrid::from_f64(dims, GridKind::Variance, &v)?);
    }
    SampleStack::new(predictions, Some(variances))
}

pub fn encode_weights(net: &ToyNet) -> Result<Vec<u8>> {
    net.validate()?;
    let mut out = Vec::with_capacity(18 + 8 * net.param_count() + 8 * net.layers.len());
    out.extend_from_slice(WEIGHTS_MAGIC);
    out.extend_from_slice(&WEIGHTS_VERSION.to_le_bytes());
    out.extend_from_slice(&net.dropout.to_le_bytes());
    out.extend_from_slice(&(net.layers.len() as u32).to_le_bytes());
    for l in &net.layers {
        out.extend_from_slice(&(l.rows as u32).to_le_bytes());
        out.extend_from_slice(&(l.cols as u32).to_le_bytes());
        for v in l.params() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or(Error::Truncated {
            expected: self.pos.saturating_add(n),
            found: self.bytes.len(),
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn decode_weights(bytes: &[u8]) -> Result<ToyNet> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4).ok() != Some(WEIGHTS_MAGIC.as_slice()) {
        return Err(Error::Format("not a network weights file".into()));
    }
    let version = u16::from_le_bytes(r.take(2)?.try_into().expect("2 bytes"));
    if version != WEIGHTS_VERSION {
        return Err(Error::Format(format!("unsupported weights version {version}")));
    }
    let dropout = r.f64()?;
    let count = r.u32()?;
    if count < 2 {
        return Err(Error::Format(format!("{count} layers; need hidden layers and a head")));
    }
    let mut layers = Vec::with_capacity(count);
    for _ in 0..count {
        let (rows, cols) = (r.u32()?, r.u32()?);
        let n = rows
            .checked_mul(cols)
            .filter(|&n| n.saturating_add(rows).saturating_mul(8) <= bytes.len())
            .ok_or_else(|| Error::Format(format!("layer shape {rows}x{cols} exceeds the file")))?;
        let weights = (0..n).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        let bias = (0..rows).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        layers.push(Layer { rows, cols, weights, bias });
    }
    if r.pos != bytes.len() {
        return Err(Error::Format(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    let net = ToyNet { layers, dropout };
    net.validate()?;
    Ok(net)
}

/// Toy image with a clean half and a label-noise half.
#[derive(Debug, Clone)]
pub struct SplitImage {
    pub image: VoxelGrid,
    pub labels: Vec<f64>,
    /// True where labels were drawn at random.
    pub noisy: Vec<bool>,
}

/// `side x side` single-slice image. Pixel intensities are uniform on
/// `[0, 1)`; the right half is shifted up by 1. Left-half labels are
/// `intensity > 0.5`; right-half labels are fair coin flips.
pub fn noisy_clean_image(side: usize, seed: u64) -> Result<SplitImage> {
    if side < 2 {
        return Err(Error::InvalidArgument("image side must be at least 2".into()));
    }
    let dims = Dims::new(side, side, 1);
    let mut rng = SimRng::new(seed);
    let mut values = Vec::with_capacity(dims.len());
    let mut labels = Vec::with_capacity(dims.len());
    let mut noisy = Vec::with_capacity(dims.len());
    for i in 0..dims.len() {
        let [x, _, _] = dims.coords(i);
        let c = rng.uniform();
        let in_noise = x >= side / 2;
        let flip = rng.bernoulli(0.5);
        values.push(if in_noise { c + 1.0 } else { c });
        labels.push(if in_noise { flip as u8 as f64 } else { (c > 0.5) as u8 as f64 });
        noisy.push(in_noise);
    }
    Ok(SplitImage { image: VoxelGrid::from_f64(dims, GridKind::Raw, &values)?, labels, noisy })
}

impl SplitImage {
    pub fn dataset(&self, radius: usize) -> Result<Dataset> {
        let dims = self.image.dims();
        let patches = (0..dims.len())
            .map(|i| {
                let [x, y, z] = dims.coords(i);
                patch_at(self.image.values(), dims, radius, x, y, z)
            })
            .collect();
        Dataset::new(patches, self.labels.clone())
    }
}
